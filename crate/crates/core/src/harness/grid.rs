//! `method × order × seed` grids executed on a bounded thread pool.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::baselines::MethodName;
use crate::harness::config::ExperimentConfig;
use crate::harness::stream::{run_stream_outcome, RunOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub method: MethodName,
    pub order: u32,
    pub seed: u64,
}

/// Cells in report order: method, then order, then seed.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &method in &cfg.method {
        for &order in &cfg.order {
            for &seed in &cfg.seed {
                cells.push(GridCell { method, order, seed });
            }
        }
    }
    cells
}

/// Run every cell with at most `jobs` threads. Results come back in cell
/// order whatever the scheduling.
pub fn run_grid(cfg: &ExperimentConfig, cells: &[GridCell], jobs: usize) -> Vec<RunOutcome> {
    let run = |cell: &GridCell| {
        let spec = cfg.method_spec(cell.method);
        match cfg.stream(cell.order, cell.seed) {
            Ok(stream) => run_stream_outcome(&stream, &spec, cfg, cell.seed),
            Err(e) => RunOutcome {
                report: crate::harness::MetricsReport::new(spec.label(), cell.seed, cell.order.to_string(), cfg.digest()),
                model: None,
                error: Some(e),
            },
        }
    };
    let jobs = jobs.clamp(1, cells.len().max(1));
    if jobs == 1 {
        return cells.iter().map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<RunOutcome>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let out = run(cell);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every cell ran"))
        .collect()
}
