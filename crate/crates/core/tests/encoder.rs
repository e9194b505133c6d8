use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trace_core::gradcheck::check_params;
use trace_core::model::*;
use trace_core::pretrain::masked_loss;
use trace_core::{Tape, Tensor};

fn tiny(channels: usize, patch_len: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        patch_len,
        channels,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn random_series(rng: &mut ChaCha8Rng, c: usize, t: usize) -> Vec<Vec<f64>> {
    (0..c)
        .map(|_| (0..t).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn hidden_rows(model: &TraceModel, xn: &[Vec<f64>]) -> (Tensor, TokenLayout) {
    let mut tape = Tape::new();
    let enc = encode_tape(
        &mut tape,
        Bind::frozen(&model.store),
        &model.encoder,
        &model.config,
        xn,
        &EncodeOptions::default(),
        None,
    )
    .unwrap();
    (tape.value(enc.hidden).clone(), enc.layout)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn sequence_length_identity(c in 1usize..6, p in 1usize..9, extra in 0usize..40) {
        let t = p + extra;
        let cfg = ModelConfig { d_model: 4, n_heads: 1, ..tiny(c, p) };
        let model = TraceModel::new(cfg, 3).unwrap();
        let x = random_series(&mut ChaCha8Rng::seed_from_u64(t as u64), c, t);
        let (h, layout) = hidden_rows(&model, &revin_normalize(&x).0);
        let expected = c * (t / p + 1) + 1;
        prop_assert_eq!(h.rows(), expected);
        prop_assert_eq!(layout.len(), expected);
        prop_assert_eq!(model.config.seq_len(t), expected);
    }
}

#[test]
fn minimal_sequence_has_three_tokens() {
    let model = TraceModel::new(tiny(1, 4), 0).unwrap();
    let (h, _) = hidden_rows(&model, &[vec![0.1, 0.2, 0.3, 0.4]]);
    assert_eq!(h.shape(), &[3, 8]);
}

#[test]
fn series_shorter_than_patch_is_rejected() {
    let model = TraceModel::new(tiny(1, 4), 0).unwrap();
    assert!(model.encode(&[vec![1.0, 2.0, 3.0]]).is_err());
}

#[test]
fn channel_order_permutes_patch_blocks() {
    let model = TraceModel::new(tiny(2, 3), 5).unwrap();
    let x = random_series(&mut ChaCha8Rng::seed_from_u64(1), 2, 9);
    let swapped = vec![x[1].clone(), x[0].clone()];
    let tok = |xs: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let (v, layout) = tokenize(
            &mut tape,
            Bind::frozen(&model.store),
            &model.encoder,
            &model.config,
            xs,
            &EncodeOptions::default(),
        )
        .unwrap();
        (tape.value(v).clone(), layout)
    };
    let (a, layout) = tok(&x);
    let (b, _) = tok(&swapped);
    let chan = model.store.value(model.encoder.channel);
    for t in 0..3 {
        let (p0, p1) = (layout.patch_pos(0, t), layout.patch_pos(1, t));
        for k in 0..8 {
            // same content, channel embedding follows the position
            let lhs = a.row(p0)[k] - chan.row(0)[k];
            let rhs = b.row(p1)[k] - chan.row(1)[k];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
    for c in 0..2 {
        assert_eq!(a.row(layout.cit_pos(c)), b.row(layout.cit_pos(c)));
    }
}

#[test]
fn masked_patches_take_the_shared_mask_embedding() {
    let model = TraceModel::new(tiny(2, 3), 5).unwrap();
    let x = random_series(&mut ChaCha8Rng::seed_from_u64(2), 2, 9);
    let bitmap = vec![false, true, false, true, false, false];
    let mut tape = Tape::new();
    let opts = EncodeOptions {
        mask: Some(&bitmap),
        ..Default::default()
    };
    let (v, layout) = tokenize(
        &mut tape,
        Bind::frozen(&model.store),
        &model.encoder,
        &model.config,
        &x,
        &opts,
    )
    .unwrap();
    let v = tape.value(v);
    let mask = model.store.value(model.encoder.mask);
    let chan = model.store.value(model.encoder.channel);
    for (c, t) in [(0, 1), (1, 0)] {
        let row = v.row(layout.patch_pos(c, t));
        for k in 0..8 {
            assert!((row[k] - mask.data()[k] - chan.row(c)[k]).abs() < 1e-12);
        }
        assert_eq!(layout.roles[layout.patch_pos(c, t)], TokenRole::MaskedPatch);
    }
    assert_eq!(layout.roles[layout.patch_pos(0, 0)], TokenRole::Patch);
}

fn rotate(v: &[f64], pos: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap());
    let r = tape.rope(x, &[pos], 10_000.0).unwrap();
    tape.value(r).data().to_vec()
}

#[test]
fn rope_identity_at_zero_and_norm_preserving() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert_eq!(rotate(&v, 0.0), v);
    for pos in [1.0, 5.0, 27.0] {
        let r = rotate(&v, pos);
        assert!((trace_core::tensor::norm(&r) - trace_core::tensor::norm(&v)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn rope_logits_depend_only_on_offset(
        seed in 0u64..1000,
        ti in 0usize..40,
        tj in 0usize..40,
        s in 0usize..60,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot = trace_core::tensor::dot;
        let a = dot(&rotate(&q, ti as f64), &rotate(&k, tj as f64));
        let b = dot(&rotate(&q, (ti + s) as f64), &rotate(&k, (tj + s) as f64));
        prop_assert!((a - b).abs() <= 1e-6);
    }
}

/// Independent plain evaluation of one pre-norm block without masking or rotation.
fn plain_block(model: &TraceModel, lp: &LayerParams, h: &Tensor) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let v = |id| model.store.value(id).data().to_vec();
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let dh = d / heads;
    let rows: Vec<Vec<f64>> = (0..h.rows()).map(|r| h.row(r).to_vec()).collect();
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(i, a)| (a - m) / (var + cfg.ln_eps).sqrt() * g[i] + b[i])
            .collect()
    };
    let lin = |x: &[f64], w: &[f64], b: &[f64], n_out: usize| -> Vec<f64> {
        (0..n_out)
            .map(|j| b[j] + x.iter().enumerate().map(|(i, a)| a * w[i * n_out + j]).sum::<f64>())
            .collect()
    };
    let gelu = |x: f64| {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    };
    let qkv: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| lin(&ln(x, &v(lp.ln1_g), &v(lp.ln1_b)), &v(lp.qkv_w), &v(lp.qkv_b), 3 * d))
        .collect();
    let l = rows.len();
    let mut concat = vec![vec![0.0; d]; l];
    for hd in 0..heads {
        for i in 0..l {
            let q = &qkv[i][hd * dh..(hd + 1) * dh];
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    let k = &qkv[j][d + hd * dh..d + (hd + 1) * dh];
                    q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..l {
                for m in 0..dh {
                    concat[i][hd * dh + m] += e[j] / z * qkv[j][2 * d + hd * dh + m];
                }
            }
        }
    }
    rows.iter()
        .zip(&concat)
        .map(|(x, o)| {
            let o = lin(o, &v(lp.out_w), &v(lp.out_b), d);
            let h1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let f = lin(&ln(&h1, &v(lp.ln2_g), &v(lp.ln2_b)), &v(lp.ff1_w), &v(lp.ff1_b), 4 * d);
            let f: Vec<f64> = f.into_iter().map(gelu).collect();
            let f = lin(&f, &v(lp.ff2_w), &v(lp.ff2_b), d);
            h1.iter().zip(&f).map(|(a, b)| a + b).collect()
        })
        .collect()
}

#[test]
fn unmasked_unrotated_layer_is_vanilla_attention() {
    let model = TraceModel::new(tiny(1, 2), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = 6;
    let h = Tensor::new(vec![l, 8], (0..l * 8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let out = cba_layer(
        &mut tape,
        Bind::frozen(&model.store),
        &model.encoder.layers[0],
        &model.config,
        hv,
        &Tensor::zeros(&[l, l]),
        &vec![0.0; l],
        None,
    )
    .unwrap();
    let oracle = plain_block(&model, &model.encoder.layers[0], &h);
    let got = tape.value(out);
    for (r, row) in oracle.iter().enumerate() {
        for (a, b) in got.row(r).iter().zip(row) {
            assert!((a - b).abs() < 1e-10, "row {r}: {a} vs {b}");
        }
    }
}

#[test]
fn cit_rows_ignore_other_channels_at_every_layer() {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 3,
        n_heads: 2,
        ..tiny(3, 4)
    };
    let model = TraceModel::new(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xn = revin_normalize(&random_series(&mut rng, 3, 16)).0;
    let mut tape = Tape::new();
    let bind = Bind::frozen(&model.store);
    let enc = encode_tape(&mut tape, bind, &model.encoder, &model.config, &xn, &EncodeOptions::default(), None)
        .unwrap();
    let layout = enc.layout.clone();
    let mask = build_attention_mask(&layout);
    let pos = layout.rope_positions();
    for (l, lp) in model.encoder.layers.iter().enumerate() {
        let input = tape.value(enc.streams[l]).clone();
        let run = |h: Tensor| {
            let mut t = Tape::new();
            let v = t.constant(h);
            let o = cba_layer(&mut t, bind, lp, &model.config, v, &mask, &pos, None).unwrap();
            t.value(o).clone()
        };
        let base = run(input.clone());
        for other in 0..3 {
            let mut perturbed = input.clone();
            let row = layout.patch_pos(other, 2);
            for k in 0..16 {
                perturbed.data_mut()[row * 16 + k] += rng.random_range(-3.0..3.0);
            }
            let out = run(perturbed);
            for c in (0..3).filter(|&c| c != other) {
                let r = layout.cit_pos(c);
                let diff = base
                    .row(r)
                    .iter()
                    .zip(out.row(r))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-6, "layer {l}: CIT {c} moved by {diff}");
            }
            let own = layout.patch_pos((other + 1) % 3, 0);
            let moved = base
                .row(own)
                .iter()
                .zip(out.row(own))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(moved > 1e-6, "patch rows should see other channels");
        }
    }
}

#[test]
fn masked_softmax_rows_sum_to_one() {
    let layout = TokenLayout::new(3, 4, true);
    let mask = build_attention_mask(&layout);
    let l = layout.len();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let s = tape.constant(
        Tensor::new(vec![l, l], (0..l * l).map(|_| rng.random_range(-5.0..5.0)).collect())
            .unwrap(),
    );
    let p = tape.softmax(s, Some(&mask)).unwrap();
    let p = tape.value(p);
    for r in 0..l {
        let sum: f64 = p.row(r).iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6);
        for (j, m) in mask.row(r).iter().enumerate() {
            if m.is_infinite() {
                assert_eq!(p.row(r)[j], 0.0);
            }
        }
    }
}

#[test]
fn encoding_is_deterministic_and_sliced_from_hidden() {
    let model = TraceModel::new(tiny(2, 3), 7).unwrap();
    let x = random_series(&mut ChaCha8Rng::seed_from_u64(3), 2, 12);
    let a = model.encode(&x).unwrap();
    let b = model.encode(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hidden.shape(), &[2 * 5 + 1, 8]);
    let layout = TokenLayout::new(2, 4, false);
    assert_eq!(a.h_cls, a.hidden.row(layout.cls_pos()));
    for c in 0..2 {
        assert_eq!(a.h_cit[c], a.hidden.row(layout.cit_pos(c)));
    }
}

#[test]
fn cls_probe_gradient_matches_finite_differences() {
    let model = TraceModel::new(tiny(2, 3), 13).unwrap();
    let x = revin_normalize(&random_series(&mut ChaCha8Rng::seed_from_u64(5), 2, 12)).0;
    let ids = model.encoder_ids();
    let report = check_params(&model.store, &ids, 1e-5, 1e-6, |tape, store| {
        let enc = encode_tape(
            tape,
            Bind::trainable(store),
            &model.encoder,
            &model.config,
            &x,
            &EncodeOptions::default(),
            None,
        )?;
        let cls = tape.slice_rows(enc.hidden, enc.layout.cls_pos(), 1)?;
        let w = tape.constant(Tensor::new(
            vec![1, 8],
            vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9, -1.3, 0.5],
        )?);
        let p = tape.mul(cls, w)?;
        Ok(tape.sum(p))
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn masked_reconstruction_gradient_matches_finite_differences() {
    let model = TraceModel::new(tiny(2, 3), 17).unwrap();
    let x = revin_normalize(&random_series(&mut ChaCha8Rng::seed_from_u64(6), 2, 12)).0;
    let bitmap = draw_patch_mask(2, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    let report = check_params(&model.store, &ids, 1e-5, 1e-6, |tape, store| {
        masked_loss(tape, &model, Bind::trainable(store), &x, &bitmap, None)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn head_shapes_and_zero_forecast_denormalizes_to_mean() {
    let model = TraceModel::new(tiny(2, 3), 7).unwrap();
    let x = random_series(&mut ChaCha8Rng::seed_from_u64(3), 2, 12);
    let (xn, state) = revin_normalize(&x);
    assert_eq!(model.reconstruct(&xn, None).unwrap().shape(), &[8, 3]);
    let cfg10 = ModelConfig { classes: 10, ..tiny(2, 3) };
    let m10 = TraceModel::new(cfg10, 7).unwrap();
    assert_eq!(m10.classify(&x).unwrap().len(), 10);

    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[2, 5]));
    let y = denormalize_tape(&mut tape, zero, &state).unwrap();
    for c in 0..2 {
        assert!(tape.value(y).row(c).iter().all(|v| (v - state.mean[c]).abs() < 1e-12));
    }

    let mut store = trace_core::ParamStore::new();
    let head = ForecastHead::init(&mut store, "fc", 4, 8, 5, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let enc = encode_tape(
        &mut tape,
        Bind::frozen(&model.store),
        &model.encoder,
        &model.config,
        &xn,
        &EncodeOptions::default(),
        None,
    )
    .unwrap();
    let f = head.forward(&mut tape, Bind::trainable(&store), &enc).unwrap();
    assert_eq!(tape.value(f).shape(), &[2, 5]);
}
