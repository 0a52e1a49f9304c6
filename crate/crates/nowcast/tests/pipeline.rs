//! Cross-module integration: full-size geometry handling, dataset
//! predictability, and scoring invariants that span binning and metrics.

use nowcast::augment::{center_crop, upsample_restore};
use nowcast::binning::RainBins;
use nowcast::dataio::{load_sample_ext, parse_manifest, persistence_baseline, synth_generate, SynthConfig};
use nowcast::metrics::{accumulate, evaluate, finalize, ConfusionCounts};
use nowcast::model::{predict, Arch, ModelState, PipelineConfig, UNetConfig};
use nowcast::Tensor;
use proptest::prelude::*;
use tempfile::tempdir;

const BOUNDARY_RATES: [f32; 16] = [
    0.0, 0.1, 0.19, 0.2, 0.21, 0.9, 1.0, 1.1, 4.9, 5.0, 5.1, 9.9, 10.0, 10.1, 15.0, 15.1,
];

/// Full-size path: 252x252 satellite, crop 126, pad to 128, predict a 42
/// patch, restore x6 back to 252. An untrained net suffices; the contract
/// is geometric.
#[test]
fn geometry_preset_round_trips_through_the_model() {
    let dir = tempdir().unwrap();
    let cfg = SynthConfig::geometry(11);
    let entries = synth_generate(&cfg, dir.path()).unwrap();
    let ext = load_sample_ext(dir.path(), &entries[0]).unwrap();
    assert_eq!(ext.inputs.shape(), &[5, 3, 252, 252]);
    assert_eq!(ext.targets.shape(), &[5, 252, 252]);

    let net = UNetConfig {
        arch: Arch::UNet2d,
        in_channels: 12,
        frames_in: 4,
        out_channels: 24,
        depth: 3,
        base_width: 4,
        dropout: 0.0,
    };
    let pipeline = PipelineConfig::geometry();
    assert_eq!(pipeline.input_crop, 126);
    assert_eq!(pipeline.patch_side, 42);
    assert_eq!(pipeline.upsample_factor, 6);
    assert_eq!(pipeline.pad_side(net.depth), 128);

    let state = ModelState::init(net, pipeline, 1e-3, 0).unwrap();
    let bins = RainBins::default();
    // drop the trailing interpolation frame
    let frame_len: usize = ext.inputs.shape()[1..].iter().product();
    let inputs = Tensor::new(
        vec![4, 3, 252, 252],
        ext.inputs.data()[..4 * frame_len].to_vec(),
    );
    let rates = predict(&state, &inputs, &bins).unwrap();
    assert_eq!(rates.shape(), &[4, 252, 252]);

    // x6 restore means every aligned 6x6 block is constant
    let reps = bins.representatives;
    for t in 0..4 {
        for bi in 0..42 {
            for bj in 0..42 {
                let v = rates.at(&[t, bi * 6, bj * 6]);
                assert!(reps.contains(&v));
                for di in 0..6 {
                    for dj in 0..6 {
                        assert_eq!(rates.at(&[t, bi * 6 + di, bj * 6 + dj]), v);
                    }
                }
            }
        }
    }
}

#[test]
fn center_crop_and_restore_offsets() {
    // 252 -> 126 crop starts at 63; a 42 patch restored x6 covers all 252
    let mut frame = Tensor::zeros(vec![1, 252, 252]);
    frame.data_mut()[63 * 252 + 63] = 7.0;
    let cropped = center_crop(&frame, 126).unwrap();
    assert_eq!(cropped.at(&[0, 0, 0]), 7.0);

    let mut patch = Tensor::zeros(vec![1, 42, 42]);
    patch.data_mut()[41 * 42 + 41] = 3.0;
    let restored = upsample_restore(&patch, 6);
    assert_eq!(restored.shape(), &[1, 252, 252]);
    assert_eq!(restored.at(&[0, 251, 251]), 3.0);
    assert_eq!(restored.at(&[0, 246, 246]), 3.0);
    assert_eq!(restored.at(&[0, 245, 245]), 0.0);
}

/// The generated satellite frames must carry enough signal that even a
/// per-pixel linear readout of the three bands beats persistence. This
/// keeps the learning task non-degenerate without training a network.
#[test]
fn linear_readout_beats_persistence() {
    let dir = tempdir().unwrap();
    let mut cfg = SynthConfig::desk(0);
    cfg.sequences = 16;
    synth_generate(&cfg, dir.path()).unwrap();
    let train = parse_manifest(&dir.path().join("manifest_train.txt")).unwrap();
    let val = parse_manifest(&dir.path().join("manifest_val.txt")).unwrap();
    let bins = RainBins::default();

    // least squares: rate ~ w0*band0 + w1*band1 + w2*band2 + b, pooled over
    // pixels. Satellite frame k is time-aligned with target frame k by
    // construction (lead == frames_in), so pairs match per pixel.
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for entry in &train {
        let ext = load_sample_ext(dir.path(), entry).unwrap();
        let (frames, bands, h, w) = (
            ext.targets.shape()[0],
            ext.inputs.shape()[1],
            ext.inputs.shape()[2],
            ext.inputs.shape()[3],
        );
        assert_eq!(bands, 3);
        for k in 0..frames {
            for i in 0..h {
                for j in 0..w {
                    let x = [
                        ext.inputs.at(&[k, 0, i, j]) as f64,
                        ext.inputs.at(&[k, 1, i, j]) as f64,
                        ext.inputs.at(&[k, 2, i, j]) as f64,
                        1.0,
                    ];
                    let y = ext.targets.at(&[k, i, j]) as f64;
                    for a in 0..4 {
                        for b in 0..4 {
                            ata[a][b] += x[a] * x[b];
                        }
                        atb[a] += x[a] * y;
                    }
                }
            }
        }
    }
    let weights = solve4(ata, atb);

    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for entry in &val {
        let ext = load_sample_ext(dir.path(), entry).unwrap();
        let (frames, h, w) = (
            ext.targets.shape()[0],
            ext.inputs.shape()[2],
            ext.inputs.shape()[3],
        );
        let mut data = Vec::with_capacity(frames * h * w);
        for k in 0..frames {
            for i in 0..h {
                for j in 0..w {
                    let y = weights[0] * ext.inputs.at(&[k, 0, i, j]) as f64
                        + weights[1] * ext.inputs.at(&[k, 1, i, j]) as f64
                        + weights[2] * ext.inputs.at(&[k, 2, i, j]) as f64
                        + weights[3];
                    data.push(y.max(0.0) as f32);
                }
            }
        }
        preds.push(Tensor::new(vec![frames, h, w], data));
        truths.push(ext.targets.clone());
    }
    let readout = evaluate(&preds, &truths, &bins).unwrap();
    let persist = persistence_baseline(dir.path(), &val, &bins).unwrap();
    assert!(
        readout.mcsi > persist.mcsi,
        "linear readout {:.4} should beat persistence {:.4}",
        readout.mcsi,
        persist.mcsi
    );
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        assert!(a[col][col].abs() > 1e-12, "singular normal equations");
        for row in 0..4 {
            if row == col {
                continue;
            }
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    [b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2], b[3] / a[3][3]]
}

/// Replacing a rate with its bin representative leaves every exceedance
/// decision unchanged except at a rate sitting exactly on a threshold,
/// where half-open binning puts it in the upper bin while strict
/// exceedance says no. The bin-index identity holds unconditionally.
#[test]
fn representatives_preserve_exceedance_at_boundaries() {
    let bins = RainBins::default();
    for &rate in &BOUNDARY_RATES {
        let bin = bins.quantize(rate).unwrap();
        let rep = bins.representatives[bin];
        let on_threshold = bins.thresholds.contains(&rate);
        for i in 0..5 {
            // exceedance is equivalent to the bin index passing the threshold
            assert_eq!(bins.exceeds(rep, i), bin > i, "rep {rep} threshold {i}");
            if !on_threshold {
                assert_eq!(
                    bins.exceeds(rep, i),
                    bins.exceeds(rate, i),
                    "rate {rate} rep {rep} threshold {i}"
                );
            }
        }
    }
}

#[test]
fn confusion_counts_are_additive_and_order_free() {
    let bins = RainBins::default();
    let a_pred = Tensor::new(vec![2, 2], vec![0.0, 3.0, 12.0, 20.0]);
    let a_truth = Tensor::new(vec![2, 2], vec![0.5, 3.0, 0.0, 20.0]);
    let b_pred = Tensor::new(vec![1, 3], vec![7.0, 0.0, 1.5]);
    let b_truth = Tensor::new(vec![1, 3], vec![0.0, 7.0, 1.5]);

    let zero = ConfusionCounts::default();
    let ca = accumulate(&zero, &a_pred, &a_truth, &bins).unwrap();
    let cb = accumulate(&zero, &b_pred, &b_truth, &bins).unwrap();
    let chained = accumulate(&ca, &b_pred, &b_truth, &bins).unwrap();
    assert_eq!(ca.merge(&cb), chained);
    assert_eq!(cb.merge(&ca), chained);

    let fwd = evaluate(
        &[a_pred.clone(), b_pred.clone()],
        &[a_truth.clone(), b_truth.clone()],
        &bins,
    )
    .unwrap();
    let rev = evaluate(&[b_pred, a_pred], &[b_truth, a_truth], &bins).unwrap();
    assert_eq!(fwd, rev);
    assert_eq!(fwd.counts, chained);
}

proptest! {
    #[test]
    fn csi_never_exceeds_f1(tp in 0u64..50, fp in 0u64..50, fnn in 0u64..50) {
        let mut counts = ConfusionCounts::default();
        for i in 0..5 {
            counts.tp[i] = tp;
            counts.fp[i] = fp;
            counts.fn_[i] = fnn;
        }
        let report = finalize(&counts);
        for i in 0..5 {
            prop_assert!(report.csi[i] <= report.f1[i] + 1e-12);
            prop_assert!(report.csi[i] >= 0.0 && report.csi[i] <= 1.0);
            prop_assert!(report.f1[i] >= 0.0 && report.f1[i] <= 1.0);
        }
    }

    #[test]
    fn scoring_random_fields_is_permutation_invariant(
        seed_a in any::<u64>(),
        seed_b in any::<u64>(),
    ) {
        let bins = RainBins::default();
        let mk = |seed: u64| {
            let mut v = Vec::with_capacity(16);
            let mut s = seed;
            for _ in 0..16 {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.push(((s >> 33) as f32 / (1u64 << 31) as f32) * 25.0);
            }
            Tensor::new(vec![4, 4], v)
        };
        let (pa, ta) = (mk(seed_a), mk(seed_a ^ 0xABCD));
        let (pb, tb) = (mk(seed_b), mk(seed_b ^ 0xABCD));
        let fwd = evaluate(&[pa.clone(), pb.clone()], &[ta.clone(), tb.clone()], &bins).unwrap();
        let rev = evaluate(&[pb, pa], &[tb, ta], &bins).unwrap();
        prop_assert_eq!(fwd, rev);
    }
}
