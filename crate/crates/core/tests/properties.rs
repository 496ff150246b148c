use ndarray::{Array1, Array2};
use proptest::prelude::*;

use avemo::audio::{melspectrogram, MelConfig, Waveform};
use avemo::data::{make_windows, read_label_csv, write_label_csv, FrameRecord, LabelFile};
use avemo::fusion::{argmax_rows, ensemble_predict, fuse_streams, EnsembleSpec, FusionDims, StreamFeatures};
use avemo::losses::{ccc_loss, cross_entropy_loss, mse_loss, softmax_rows};
use avemo::net::{ModelSpec, SeqModel};
use avemo::Task;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
    })
}

fn members(n: usize, rows: usize) -> impl Strategy<Value = Vec<Array2<f64>>> {
    prop::collection::vec(matrix(rows, 7, -4.0, 4.0).prop_map(|l| softmax_rows(l.view())), n)
}

fn expr_spec(w: Vec<f64>) -> EnsembleSpec {
    EnsembleSpec {
        members: (0..w.len()).map(|i| format!("m{i}")).collect(),
        weights: w,
        task: Task::Expr,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ensemble_is_convex((ms, w) in (1usize..5).prop_flat_map(|n| (members(n, 6), weights(n)))) {
        let views: Vec<_> = ms.iter().map(|m| m.view()).collect();
        let out = ensemble_predict(&views, &expr_spec(w)).unwrap();
        for ((t, c), &v) in out.indexed_iter() {
            let lo = ms.iter().map(|m| m[[t, c]]).fold(f64::INFINITY, f64::min);
            let hi = ms.iter().map(|m| m[[t, c]]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn shared_row_scaling_keeps_ensemble_argmax(
        (ms, w) in (1usize..4).prop_flat_map(|n| (members(n, 5), weights(n))),
        scale in prop::collection::vec(0.1f64..10.0, 5),
    ) {
        let views: Vec<_> = ms.iter().map(|m| m.view()).collect();
        let spec = expr_spec(w);
        let base = argmax_rows(ensemble_predict(&views, &spec).unwrap().view());
        let scaled: Vec<Array2<f64>> = ms
            .iter()
            .map(|m| {
                let mut s = m.clone();
                for (t, mut row) in s.rows_mut().into_iter().enumerate() {
                    row *= scale[t];
                    let z = row.sum();
                    row /= z;
                }
                s
            })
            .collect();
        let views: Vec<_> = scaled.iter().map(|m| m.view()).collect();
        prop_assert_eq!(argmax_rows(ensemble_predict(&views, &spec).unwrap().view()), base);
    }

    #[test]
    fn fused_spans_depend_only_on_dims(
        face in 1usize..6, context in 1usize..6, body in 1usize..6, pattern in 1u8..8,
    ) {
        let dims = FusionDims { face, context, body };
        let present = [pattern & 1 != 0, pattern & 2 != 0, pattern & 4 != 0];
        let widths = [face, context, body];
        let stream = |k: usize| present[k].then(|| Array1::from_elem(widths[k], (k + 1) as f64));
        let fused = fuse_streams(
            &StreamFeatures { frame_index: 0, face: stream(0), context: stream(1), body: stream(2) },
            &dims,
        )
        .unwrap();
        prop_assert_eq!(fused.values.len(), face + context + body);
        let mut at = 0;
        for (k, span) in dims.spans().into_iter().enumerate() {
            prop_assert_eq!(span.clone(), at..at + widths[k]);
            at = span.end;
            let want = if present[k] { (k + 1) as f64 } else { 0.0 };
            prop_assert!(fused.values.slice(ndarray::s![span]).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn windows_cover_every_frame_and_pad_invalid(n in 1usize..120, t_len in 1usize..40, stride_frac in 0.0f64..1.0) {
        let stride = 1 + ((t_len - 1) as f64 * stride_frac) as usize;
        let feats = Array2::from_shape_fn((n, 2), |(t, j)| (t * 2 + j) as f64);
        let records: Vec<FrameRecord> = (0..n).map(|t| FrameRecord::expr(t, Some(t % 7))).collect();
        let ws = make_windows(feats.view(), &records, t_len, stride, "v").unwrap();
        let mut seen = vec![0usize; n];
        for w in &ws {
            prop_assert_eq!(w.len(), t_len);
            for (k, &valid) in w.valid_mask.iter().enumerate() {
                let frame = w.start + k;
                prop_assert_eq!(valid, frame < n);
                if valid {
                    seen[frame] += 1;
                    prop_assert_eq!(w.features[[k, 0]], feats[[frame, 0]]);
                    prop_assert_eq!(w.labels[k].frame_index, frame);
                } else {
                    prop_assert!(!w.label_mask(Task::Expr)[k]);
                }
            }
        }
        prop_assert!(seen.iter().all(|&c| c >= 1));
    }

    #[test]
    fn loss_ranges(p in matrix(8, 2, -1.0, 1.0), g in matrix(8, 2, -1.0, 1.0), logits in matrix(8, 7, -30.0, 30.0),
                   gold in prop::collection::vec(prop::option::of(0usize..7), 8)) {
        let pv: Vec<f64> = p.column(0).to_vec();
        let pa: Vec<f64> = p.column(1).to_vec();
        let gv: Vec<f64> = g.column(0).to_vec();
        let ga: Vec<f64> = g.column(1).to_vec();
        let c = ccc_loss(&pv, &gv, &pa, &ga).unwrap().value;
        prop_assert!((0.0..=2.0).contains(&c), "ccc loss {}", c);
        prop_assert!(mse_loss(p.view(), g.view(), None).unwrap().value >= 0.0);
        if gold.iter().any(Option::is_some) {
            let ce = cross_entropy_loss(logits.view(), &gold).unwrap();
            prop_assert!(ce.value >= 0.0 && ce.value.is_finite());
            prop_assert!(ce.grad.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn va_outputs_in_open_interval(xs in matrix(6, 4, -50.0, 50.0), seed in 0u64..1000) {
        let spec = ModelSpec { task: Task::Va, input_dim: 4, hidden_dim: 3, bidirectional: true, emb_dim: None };
        let mut model = SeqModel::new(spec, seed).unwrap();
        for (_, t) in model.tensors_mut() {
            for v in t.iter_mut() {
                *v *= 40.0;
            }
        }
        let ys = model.predict(xs.view()).unwrap();
        prop_assert!(ys.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn each_direction_only_sees_its_own_side(xs in matrix(7, 3, -2.0, 2.0), edit_at in 0usize..6, seed in 0u64..100) {
        let spec = ModelSpec { task: Task::Va, input_dim: 3, hidden_dim: 4, bidirectional: true, emb_dim: None };
        let model = SeqModel::new(spec, seed).unwrap();
        let (_, before) = model.forward(xs.view()).unwrap();
        let mut edited = xs.clone();
        edited.row_mut(edit_at).mapv_inplace(|v| v + 1.5);
        let (_, after) = model.forward(edited.view()).unwrap();
        // hidden = [forward | backward]; backward state at t sees only frames >= t
        let h = 4;
        for t in 0..7 {
            let fwd_same = before.hidden().row(t).slice(ndarray::s![..h]) == after.hidden().row(t).slice(ndarray::s![..h]);
            let bwd_same = before.hidden().row(t).slice(ndarray::s![h..]) == after.hidden().row(t).slice(ndarray::s![h..]);
            if t < edit_at {
                prop_assert!(fwd_same);
            }
            if t > edit_at {
                prop_assert!(bwd_same);
            }
        }
    }

    #[test]
    fn label_csv_roundtrip(labels in prop::collection::vec(prop::option::of((-1.0f64..1.0, -1.0f64..1.0)), 1..30)) {
        let file = LabelFile {
            task: Task::Va,
            records: labels.iter().enumerate().map(|(t, l)| match l {
                Some((v, a)) => FrameRecord::va(t, Some(*v), Some(*a)),
                None => FrameRecord::va(t, None, None),
            }).collect(),
            probs: None,
        };
        let mut buf = Vec::new();
        write_label_csv(&mut buf, &file).unwrap();
        let back = read_label_csv(buf.as_slice(), std::path::Path::new("mem.csv")).unwrap();
        prop_assert_eq!(back, file);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn louder_signal_never_lowers_a_mel_cell(seed in 0u64..1000, alpha in 1.0f64..20.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..4096).map(|_| rng.random_range(-0.05..0.05)).collect();
        let cfg = MelConfig::default();
        let quiet = melspectrogram(&Waveform::new(samples.clone(), 16_000).unwrap(), &cfg).unwrap();
        let loud = melspectrogram(&Waveform::new(samples.iter().map(|s| s * alpha).collect(), 16_000).unwrap(), &cfg).unwrap();
        for (q, l) in quiet.values.iter().zip(loud.values.iter()) {
            prop_assert!(*l >= *q - 1e-12);
            prop_assert!(*q >= -10.0);
        }
    }
}
