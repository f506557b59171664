use rankswitch_core::profiler::{
    arithmetic_intensity, benchmark_stack, default_stacks, select_k, FlopClock, IterationClock, LayerStack,
    ProfiledLayer, ProfilerConfig, WorkloadShape,
};
use rankswitch_core::{Error, Result};

/// Charges a fixed (full, low) cost per stack, keyed by its first layer.
struct TableClock(Vec<(usize, f64, f64)>);

impl IterationClock for TableClock {
    fn executes(&self) -> bool {
        false
    }

    fn time_iteration(&mut self, layers: &[ProfiledLayer], _: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        let first = layers[0].layer;
        let &(_, full, low) = self.0.iter().find(|e| e.0 == first).unwrap();
        Ok(if layers[0].rank.is_some() { low } else { full })
    }
}

fn dense_model(len: usize) -> Vec<WorkloadShape> {
    vec![WorkloadShape::dense(8, 16, 16); len]
}

fn stacks(ranges: &[(usize, usize)]) -> Vec<LayerStack> {
    ranges
        .iter()
        .enumerate()
        .map(|(i, &(l_beg, l_end))| LayerStack { id: i + 1, l_beg, l_end })
        .collect()
}

#[test]
fn failing_leading_stack_sets_k() {
    let model = dense_model(6);
    let s = stacks(&[(2, 3), (4, 5)]);
    let mut clock = TableClock(vec![(2, 100.0, 90.0), (4, 100.0, 50.0)]);
    let report = select_k(&model, &s, &ProfilerConfig::default(), &mut clock).unwrap();
    assert_eq!(report.k_hat, 3);
    assert!((report.stacks[0].speedup - 100.0 / 90.0).abs() < 1e-12);
}

#[test]
fn all_passing_keeps_first_layer_only() {
    let model = dense_model(6);
    let s = stacks(&[(2, 3), (4, 5)]);
    let mut clock = TableClock(vec![(2, 100.0, 10.0), (4, 100.0, 10.0)]);
    assert_eq!(select_k(&model, &s, &ProfilerConfig::default(), &mut clock).unwrap().k_hat, 1);
}

#[test]
fn later_failures_do_not_extend_prefix() {
    let model = dense_model(8);
    let s = stacks(&[(2, 3), (4, 5), (6, 7)]);
    let mut clock = TableClock(vec![(2, 100.0, 10.0), (4, 100.0, 90.0), (6, 100.0, 90.0)]);
    assert_eq!(select_k(&model, &s, &ProfilerConfig::default(), &mut clock).unwrap().k_hat, 1);
}

#[test]
fn upsilon_monotone() {
    let model = dense_model(8);
    let s = stacks(&[(2, 3), (4, 5), (6, 7)]);
    let table = vec![(2, 100.0, 80.0), (4, 100.0, 60.0), (6, 100.0, 30.0)];
    let mut last = 0;
    for upsilon in [1.1, 1.3, 1.5, 2.0, 5.0] {
        let cfg = ProfilerConfig { upsilon, ..Default::default() };
        let k = select_k(&model, &s, &cfg, &mut TableClock(table.clone())).unwrap().k_hat;
        assert!(k >= last, "upsilon {upsilon}");
        last = k;
    }
}

#[test]
fn tiny_layers_show_no_speedup() {
    let model = vec![WorkloadShape::dense(4, 2, 2); 3];
    let stack = LayerStack { id: 1, l_beg: 2, l_end: 2 };
    let t = benchmark_stack(&model, &stack, &ProfilerConfig::default(), &mut FlopClock::default()).unwrap();
    assert!((t.speedup() - 1.0).abs() < 1e-12);
}

#[test]
fn invalid_inputs() {
    let model = dense_model(4);
    let mut clock = FlopClock::default();
    let bad = LayerStack { id: 1, l_beg: 3, l_end: 9 };
    assert!(matches!(
        benchmark_stack(&model, &bad, &ProfilerConfig::default(), &mut clock),
        Err(Error::Profile(_))
    ));
    let overlapping = stacks(&[(2, 3), (3, 3)]);
    assert!(select_k(&model, &overlapping, &ProfilerConfig::default(), &mut clock).is_err());
}

#[test]
fn intensity_paper_limits() {
    let first = WorkloadShape::conv(1 << 22, 64, 64, 3, 32);
    assert!((arithmetic_intensity(&first) / 576.0 - 1.0).abs() < 1e-3);
    let deep = WorkloadShape::conv(1024, 1 << 24, 1 << 24, 3, 8);
    assert!((arithmetic_intensity(&deep) / 65_536.0 - 1.0).abs() < 1e-3);
}

#[test]
fn stacks_from_conv_layout() {
    let model = vec![
        WorkloadShape::conv(2, 3, 8, 3, 8),
        WorkloadShape::conv(2, 8, 8, 3, 8),
        WorkloadShape::conv(2, 8, 8, 3, 8),
        WorkloadShape::dense(2, 512, 10),
    ];
    assert_eq!(default_stacks(&model), stacks(&[(2, 3)]));
}
