//! Experiment grids.
