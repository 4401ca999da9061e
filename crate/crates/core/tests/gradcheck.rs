use csan::autodiff::BackwardFault;
use csan::cli::{gradcheck_with_fault, run_gradcheck, GRADCHECK_TOLERANCE};
use csan::{AttentionMode, EncoderConfig};

const MODES: [AttentionMode; 3] = [
    AttentionMode::Global,
    AttentionMode::Conv1d { window: 2 },
    AttentionMode::Conv2d { window: 2, head_span: 2 },
];

#[test]
fn every_parameter_tensor_passes_in_every_mode() {
    for mode in MODES {
        let config = EncoderConfig::gradcheck_toy(mode).unwrap();
        let report = run_gradcheck(&config, 7).unwrap();
        assert_eq!(report.rows.len(), 27);
        assert!(report.passed(), "{mode}: worst {:e}", report.worst());
        assert!(report.worst() < GRADCHECK_TOLERANCE);
    }
}

#[test]
fn broken_backward_rules_are_caught() {
    for fault in [BackwardFault::UncenteredAttentionSoftmax, BackwardFault::LayerNormMissingMean] {
        for mode in MODES {
            let config = EncoderConfig::gradcheck_toy(mode).unwrap();
            let report = gradcheck_with_fault(&config, 7, Some(fault)).unwrap();
            assert!(!report.passed(), "{fault:?} in {mode} went unnoticed");
        }
    }
}

#[test]
fn report_lists_tensors_in_checkpoint_order() {
    let config = EncoderConfig::gradcheck_toy(AttentionMode::Global).unwrap();
    let report = run_gradcheck(&config, 0).unwrap();
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tensor,max_rel_error"));
    assert!(lines.next().unwrap().starts_with("embedding,"));
    assert!(csv.trim_end().lines().last().unwrap().starts_with("head.bias,"));
}
