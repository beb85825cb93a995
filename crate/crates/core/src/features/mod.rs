//! Text and audio preprocessing.

mod mfcc;
mod text;
mod wav;

pub use mfcc::{
    audio_features, chunk_frames, dct_matrix, hamming, hz_to_mel, log_mel_energies, mel_centers,
    mel_edges, mel_filterbank, mel_to_hz, mfcc, MfccConfig,
};
pub use text::{build_vocab, clean_and_tokenize, Vocab, PAD_TOKEN, UNK_TOKEN};
pub use wav::{encode_wav, parse_wav, read_wav, write_wav, AudioSignal};
