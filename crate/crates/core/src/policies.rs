//! Policy extraction and simulation (placeholder during bring-up).
