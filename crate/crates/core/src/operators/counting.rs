use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{LinearMap, ViewOperator};

/// Shared tallies of projector work. One "view-row access" is one detector
/// row of one view evaluated in a forward or backward projection.
#[derive(Debug)]
pub struct WorkCounter {
    row_accesses: AtomicU64,
    forward_calls: AtomicU64,
    adjoint_calls: AtomicU64,
    per_view: Vec<AtomicU64>,
}

impl WorkCounter {
    pub fn new(n_views: usize) -> Self {
        Self {
            row_accesses: AtomicU64::new(0),
            forward_calls: AtomicU64::new(0),
            adjoint_calls: AtomicU64::new(0),
            per_view: (0..n_views).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn row_accesses(&self) -> u64 {
        self.row_accesses.load(Ordering::Relaxed)
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn adjoint_calls(&self) -> u64 {
        self.adjoint_calls.load(Ordering::Relaxed)
    }

    /// How many times each view has been touched.
    pub fn view_touches(&self) -> Vec<u64> {
        self.per_view.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset(&self) {
        self.row_accesses.store(0, Ordering::Relaxed);
        self.forward_calls.store(0, Ordering::Relaxed);
        self.adjoint_calls.store(0, Ordering::Relaxed);
        for c in &self.per_view {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn record(&self, views: &[usize], n_det: usize) {
        self.row_accesses
            .fetch_add((views.len() * n_det) as u64, Ordering::Relaxed);
        for &v in views {
            self.per_view[v].fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Decorator that tallies every view a projector evaluates.
#[derive(Debug, Clone)]
pub struct CountingOperator<T> {
    inner: T,
    counter: Arc<WorkCounter>,
}

impl<T: ViewOperator> CountingOperator<T> {
    pub fn new(inner: T) -> Self {
        let counter = Arc::new(WorkCounter::new(inner.n_views()));
        Self { inner, counter }
    }

    pub fn counter(&self) -> Arc<WorkCounter> {
        Arc::clone(&self.counter)
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: ViewOperator> LinearMap for CountingOperator<T> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let views: Vec<usize> = (0..self.inner.n_views()).collect();
        self.forward_views(x, &views, y);
    }

    fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let views: Vec<usize> = (0..self.inner.n_views()).collect();
        self.adjoint_views(y, &views, x);
    }
}

impl<T: ViewOperator> ViewOperator for CountingOperator<T> {
    fn n_views(&self) -> usize {
        self.inner.n_views()
    }

    fn n_detectors(&self) -> usize {
        self.inner.n_detectors()
    }

    fn forward_views(&self, image: &[f64], views: &[usize], out: &mut [f64]) {
        self.counter.forward_calls.fetch_add(1, Ordering::Relaxed);
        self.counter.record(views, self.inner.n_detectors());
        self.inner.forward_views(image, views, out)
    }

    fn adjoint_views(&self, data: &[f64], views: &[usize], out: &mut [f64]) {
        self.counter.adjoint_calls.fetch_add(1, Ordering::Relaxed);
        self.counter.record(views, self.inner.n_detectors());
        self.inner.adjoint_views(data, views, out)
    }
}
