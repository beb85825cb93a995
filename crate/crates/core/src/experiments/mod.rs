//! The 42-candidate grid, its result tables and the declarative-question
//! analysis.

mod declarative;
mod grid;
mod prepare;
mod tables;

pub use declarative::{declarative_analysis, declarative_from_scores, is_declarative, DeclarativeRow, DeclarativeTable};
pub use grid::{
    cache_key, run_grid, train_cell, CellOutcome, CellRecord, CellResult, GridCell, GridOptions, GridResult,
    GridSpec, GridStats, ModelSizes, RunConfig, TrainedCell, CELLS_DIR, ERROR_FILE, GRID_RESULT_FILE, LOG_FILE, MODEL_FILE,
    RESULT_FILE,
};
pub use prepare::{prepare_data, DataConfig, PreparedData};
pub use tables::{
    declarative_table, emit_table, grid_declarative, length_table, main_table, percent, render, write_tables,
    Table, TableFormat, TableKind, MISSING,
};
