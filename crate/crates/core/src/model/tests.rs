use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::check_params;
use crate::loss::{total_loss_var, LossInputs, LossWeights, PixelLossConfig, WeakTargets};
use crate::volume::{sample_observations, SampleObservation, SupervisionSpec};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 4,
        height: 16,
        width: 16,
        encoder: EncoderConfig {
            k_freq: 2,
            d_model: 8,
            patch_size: 4,
            depth: 1,
            heads: 2,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig {
            base_channels: 8,
            stages: 3,
            nonlocal_stages: vec![0],
            channel_floor: 4,
            res_blocks: 1,
        },
        seed: 3,
        ..ModelConfig::default()
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, top: f64) -> BuildingHeightMap<f64> {
    let v = (0..h * w)
        .map(|_| if rng.random_bool(0.3) { rng.random_range(0.5..top) } else { 0.0 })
        .collect();
    BuildingHeightMap::new(h, w, v).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, k: usize) -> Tensor<f64> {
    Tensor::from_fn([k, 4], |_| rng.random_range(0.0..1.0))
}

fn random_samples(rng: &mut ChaCha8Rng, k: usize, cfg: &ModelConfig) -> SampleSet {
    let mut obs = Vec::new();
    while obs.len() < k {
        let o = SampleObservation {
            x: rng.random_range(0..cfg.width) as f64,
            y: rng.random_range(0..cfg.height) as f64,
            z: rng.random_range(0..cfg.layers) as f64,
            value: rng.random_range(0.0..1.0),
        };
        if !obs.iter().any(|p: &SampleObservation| (p.x, p.y, p.z) == (o.x, o.y, o.z)) {
            obs.push(o);
        }
    }
    SampleSet::new(obs).unwrap()
}

/// Moves every parameter to a random point with O(1) activations so no gradient
/// sits at the finite-difference noise floor.
fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        if p.name.starts_with("render.") {
            continue;
        }
        let shape = p.tensor.shape().to_vec();
        if shape.len() == 2 {
            let s = 1.0 / (*shape.iter().max().unwrap() as f64).sqrt();
            p.tensor = Tensor::from_fn(shape, |_| rng.random_range(-s..s) * 1.5);
        } else {
            for v in p.tensor.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
}

fn altitudes(n: usize) -> Vec<f64> {
    (1..=n).map(|v| v as f64).collect()
}

#[test]
fn fourier_examples() {
    let zero = fourier_encode([0.0; 3], 4);
    assert_eq!(zero.len(), 24);
    for k in 0..4 {
        assert!(zero[6 * k..6 * k + 3].iter().all(|&v| v == 0.0));
        assert!(zero[6 * k + 3..6 * k + 6].iter().all(|&v| v == 1.0));
    }
    assert_eq!(fourier_encode([0.1, 0.2, 0.3], 6).len(), 36);
    let half = fourier_encode([0.5, 0.0, 0.0], 1);
    let want = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
    for (a, b) in half.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn fourier_pairs_are_unit() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let p = [rng.random(), rng.random(), rng.random()];
        let f = fourier_encode(p, 6);
        for k in 0..6 {
            for a in 0..3 {
                let (s, c) = (f[6 * k + a], f[6 * k + 3 + a]);
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
    }
}

fn point_encoder() -> (ParamStore<f64>, PointEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EncoderConfig { d_model: 16, k_freq: 3, ..EncoderConfig::default() };
    let enc = PointEncoder::new(&mut store, &mut rng, &cfg);
    (store, enc)
}

#[test]
fn zeroed_film_head_is_identity() {
    let (mut store, enc) = point_encoder();
    store.get_mut(enc.film.fc2.weight).data_mut().fill(0.0);
    store.get_mut(enc.film.fc2.bias.unwrap()).data_mut().fill(0.0);
    let mut g = Graph::inference(&store);
    let pv = g.constant(random_points(&mut ChaCha8Rng::seed_from_u64(2), 7));
    let out = enc.encode(&mut g, pv).unwrap();
    assert_eq!(g.value(out.tokens).data(), g.value(out.h).data());
}

#[test]
fn radii_exceed_epsilon_and_film_is_bounded() {
    let (store, enc) = point_encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::inference(&store);
    let mut pts = random_points(&mut rng, 64);
    // extreme inputs push the radius MLP towards large negative pre-activations
    pts.data_mut()[0..4].copy_from_slice(&[-50.0, -50.0, -50.0, -50.0]);
    let pv = g.constant(pts);
    let out = enc.encode(&mut g, pv).unwrap();
    assert!(g.value(out.radii).data().iter().all(|&r| r > enc.epsilon));
    let (z, h, b) = (g.value(out.tokens).data(), g.value(out.h).data(), g.value(out.beta).data());
    for i in 0..z.len() {
        assert!((z[i] - b[i]).abs() <= (1.0 + enc.alpha) * h[i].abs() + 1e-12);
    }
}

#[test]
fn value_modulates_tokens_but_not_features() {
    let (store, enc) = point_encoder();
    let mut g = Graph::inference(&store);
    let pv = g.constant(Tensor::new([2, 4], vec![0.3, 0.6, 0.2, 0.1, 0.3, 0.6, 0.2, 0.9]));
    let out = enc.encode(&mut g, pv).unwrap();
    let d = enc.d_model;
    let (h, z) = (g.value(out.h).data(), g.value(out.tokens).data());
    assert_eq!(h[..d], h[d..]);
    assert!(z[..d].iter().zip(&z[d..]).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn point_rows_permute_with_samples() {
    let (store, enc) = point_encoder();
    let pts = random_points(&mut ChaCha8Rng::seed_from_u64(4), 5);
    let order = [3, 0, 4, 1, 2];
    let permuted = Tensor::from_fn([5, 4], |i| pts.data()[order[i / 4] * 4 + i % 4]);
    let run = |t: Tensor<f64>| {
        let mut g = Graph::inference(&store);
        let pv = g.constant(t);
        let out = enc.encode(&mut g, pv).unwrap();
        g.value(out.tokens).clone()
    };
    let (a, b) = (run(pts), run(permuted));
    let d = enc.d_model;
    for (i, &o) in order.iter().enumerate() {
        assert_eq!(b.data()[i * d..(i + 1) * d], a.data()[o * d..(o + 1) * d]);
    }
}

#[test]
fn non_finite_points_are_rejected() {
    let (store, enc) = point_encoder();
    let mut g = Graph::inference(&store);
    let pv = g.constant(Tensor::new([1, 4], vec![0.1, f64::NAN, 0.2, 0.3]));
    assert!(enc.encode(&mut g, pv).is_err());
}

#[test]
fn point_encoder_gradients() {
    let (store, enc) = point_encoder();
    let pts = random_points(&mut ChaCha8Rng::seed_from_u64(6), 3);
    let w = Tensor::from_fn([3 * enc.d_model], |i| (i as f64 * 0.37).sin());
    let report = check_params(&store, 1e-5, 24, 1, |g| {
        let pv = g.constant(pts.clone());
        let out = enc.encode(g, pv).unwrap();
        let flat = g.reshape(out.tokens, [3 * enc.d_model]);
        let wv = g.constant(w.clone());
        let p = g.mul(flat, wv);
        g.sum(p)
    });
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn map_encoder(depth: usize) -> (ParamStore<f64>, MapEncoder, EncoderConfig) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = EncoderConfig { d_model: 16, depth, ..EncoderConfig::default() };
    let enc = MapEncoder::new(&mut store, &mut rng, &cfg, 64, 64).unwrap();
    (store, enc, cfg)
}

#[test]
fn map_tokens_and_attention_rows() {
    let (store, enc, _) = map_encoder(2);
    let map = random_map(&mut ChaCha8Rng::seed_from_u64(1), 64, 64, 7.0);
    let run = || {
        let mut g = Graph::inference(&store);
        let out = enc.encode(&mut g, &map, 8.0).unwrap();
        assert_eq!(g.shape(out.tokens), &[64, 16]);
        for block in &out.attention {
            assert_eq!(block.len(), 4);
            for &p in block {
                for row in g.value(p).data().chunks(64) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
        g.value(out.tokens).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn map_dimensions_are_checked() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert!(MapEncoder::new(&mut store, &mut rng, &EncoderConfig::default(), 60, 64).is_err());
    let bad = EncoderConfig { d_model: 30, heads: 4, ..EncoderConfig::default() };
    assert!(bad.validate(64, 64).is_err());
    let (store, enc, _) = map_encoder(1);
    let mut g = Graph::inference(&store);
    assert!(enc.encode(&mut g, &BuildingHeightMap::flat(32, 32), 8.0).is_err());
}

fn fusion(dim: usize, heads: usize) -> (ParamStore<f64>, CrossAttentionFusion) {
    let mut store = ParamStore::new();
    let f = CrossAttentionFusion::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), dim, heads);
    (store, f)
}

#[test]
fn single_point_attends_with_unit_weight() {
    let (store, f) = fusion(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::inference(&store);
    let m = g.constant(Tensor::from_fn([6, 8], |_| rng.random_range(-1.0..1.0)));
    let z = Tensor::from_fn([1, 8], |_| rng.random_range(-1.0..1.0));
    let zv = g.constant(z.clone());
    let out = f.forward(&mut g, m, zv).unwrap();
    for &p in &out.probs {
        assert!(g.value(p).data().iter().all(|&v| v == 1.0));
    }
    // oracle: z W_V W_O + b_O by hand
    let wv = store.get(f.attn.wv.weight).data();
    let wo = store.get(f.attn.wo.weight).data();
    let bo = store.get(f.attn.wo.bias.unwrap()).data();
    let v: Vec<f64> = (0..8).map(|c| (0..8).map(|r| z.data()[r] * wv[r * 8 + c]).sum()).collect();
    let o: Vec<f64> = (0..8).map(|c| bo[c] + (0..8).map(|r| v[r] * wo[r * 8 + c]).sum::<f64>()).collect();
    for row in g.value(out.attended).data().chunks(8) {
        for (a, b) in row.iter().zip(&o) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn duplicate_and_permuted_points_leave_fusion_unchanged() {
    let (store, f) = fusion(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps = Tensor::from_fn([5, 8], |_| rng.random_range(-1.0..1.0));
    let pts = Tensor::from_fn([3, 8], |_| rng.random_range(-1.0..1.0));
    let run = |p: Tensor<f64>| {
        let mut g = Graph::inference(&store);
        let m = g.constant(maps.clone());
        let pv = g.constant(p);
        let out = f.forward(&mut g, m, pv).unwrap();
        for &pr in &out.probs {
            for row in g.value(pr).data().chunks(g.shape(pr)[1]) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        g.value(out.tokens).clone()
    };
    let close = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-6);
    let base = run(pts.clone());
    let perm = Tensor::from_fn([3, 8], |i| pts.data()[[2, 0, 1][i / 8] * 8 + i % 8]);
    assert!(close(&base, &run(perm)));
    // a copy of every token keeps each key's share of the softmax mass
    let mut doubled = pts.data().to_vec();
    doubled.extend_from_slice(pts.data());
    assert!(close(&base, &run(Tensor::new([6, 8], doubled))));
    // k = 1 -> 2 identical copies
    let one = Tensor::new([1, 8], pts.data()[..8].to_vec());
    let two = Tensor::new([2, 8], [&pts.data()[..8], &pts.data()[..8]].concat());
    assert!(close(&run(one), &run(two)));
    // duplicating one token out of several does reweight the softmax
    let mut dup = pts.data().to_vec();
    dup.extend_from_slice(&pts.data()[8..16]);
    assert!(!close(&base, &run(Tensor::new([4, 8], dup))));
    let mut g = Graph::inference(&store);
    let m = g.constant(maps.clone());
    let bad = g.constant(Tensor::zeros([2, 6]));
    assert!(f.forward(&mut g, m, bad).is_err());
}

#[test]
fn decoder_shapes_and_range() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = DecoderConfig { base_channels: 16, channel_floor: 8, ..DecoderConfig::default() };
    let dec = VolumeDecoder::new(&mut store, &mut rng, &cfg, 8, (8, 8), 8).unwrap();
    let mut g = Graph::inference(&store);
    let t = g.constant(Tensor::from_fn([64, 8], |_| rng.random_range(-1.0..1.0)));
    let out = dec.forward(&mut g, t).unwrap();
    assert_eq!(g.shape(out), &[8, 64, 64]);
    assert!(g.value(out).data().iter().all(|v| (0.0..=1.0).contains(v)));
    let wrong = g.constant(Tensor::zeros([16, 8]));
    assert!(dec.forward(&mut g, wrong).is_err());
    assert!(DecoderConfig { nonlocal_stages: vec![4], ..cfg }.validate().is_err());
}

#[test]
fn nonlocal_starts_as_identity() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let nl = NonLocal::new(&mut store, &mut rng, "nl", 8);
    let x = Tensor::from_fn([8, 4, 4], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::inference(&store);
    let xv = g.constant(x.clone());
    let y = nl.forward(&mut g, xv);
    assert_eq!(g.value(y), &x);
}

#[test]
fn decoder_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // two channels per norm group, otherwise a conv bias feeding a norm has zero gradient
    let cfg = DecoderConfig { base_channels: 16, stages: 2, channel_floor: 16, res_blocks: 1, ..DecoderConfig::default() };
    let dec = VolumeDecoder::new(&mut store, &mut rng, &cfg, 4, (2, 2), 3).unwrap();
    perturb(&mut store, 1);
    let tokens = Tensor::from_fn([4, 4], |_| rng.random_range(-1.0..1.0));
    let report = check_params(&store, 1e-5, 12, 2, |g| {
        let t = g.constant(tokens.clone());
        let out = dec.forward(g, t).unwrap();
        g.sum(out)
    });
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn config_consistency() {
    assert!(ModelConfig::default().validate().is_ok());
    let mut c = ModelConfig::default();
    c.decoder.stages = 3;
    assert!(c.validate().is_err());
    assert_eq!(ModelConfig::default().decoder.channels(), vec![128, 64, 32, 32]);
}

#[test]
fn forward_is_sample_order_and_count_agnostic() {
    let cfg = tiny_config();
    let model = Model::<f64>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let map = random_map(&mut rng, 16, 16, 4.0);
    let alts = altitudes(4);
    for k in [1, 50] {
        let s = random_samples(&mut rng, k, &cfg);
        let v = model.predict(&map, 4.0, &s, &alts).unwrap();
        assert_eq!(v.dims(), (4, 16, 16));
    }
    let s = random_samples(&mut rng, 9, &cfg);
    let order: Vec<usize> = (0..9).rev().collect();
    let a = model.predict(&map, 4.0, &s, &alts).unwrap();
    let b = model.predict(&map, 4.0, &s.permuted(&order), &alts).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::<f32>::new(tiny_config()).unwrap();
    let bytes = save_checkpoint(&model).unwrap();
    let back: Model<f32> = load_checkpoint(&bytes).unwrap();
    assert_eq!(back.config, model.config);
    for (a, b) in model.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor, b.tensor);
    }
    assert_eq!(save_checkpoint(&back).unwrap(), bytes);
    assert!(load_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(load_checkpoint::<f32>(&bad).is_err());
}

#[test]
fn end_to_end_total_loss_gradients() {
    let cfg = tiny_config();
    let mut model = Model::<f64>::new(cfg.clone()).unwrap();
    perturb(&mut model.store, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let alts = altitudes(4);
    let truth = RadioVolume::new(4, 16, 16, (0..1024).map(|_| rng.random_range(0.0..1.0)).collect(), alts.clone()).unwrap();
    let map = random_map(&mut rng, 16, 16, 4.0);
    let spec = SupervisionSpec::new(vec![0, 3], 0.3, 4).unwrap();
    let targets = WeakTargets::new(&truth, &spec).unwrap();
    let samples = sample_observations(&truth, 5, 3).unwrap();
    let inputs = LossInputs { targets: &targets, buildings: &map, max_height: 4.0, samples: &samples };
    let pv = point_inputs::<f64>(&samples, 4, 16, 16).unwrap();
    let rp = RenderParams::for_altitudes(&alts);
    let report = check_params(&model.store, 1e-5, 6, 4, |g| {
        let x = g.constant(pv.clone());
        let f = model.forward_graph(g, &map, 4.0, x).unwrap();
        let terms = total_loss_var(
            g,
            f.volume,
            &inputs,
            &LossWeights::default(),
            f.render_k,
            f.render_t,
            &rp,
            &PixelLossConfig::default(),
        )
        .unwrap();
        terms.total
    });
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
