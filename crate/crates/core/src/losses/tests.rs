use super::*;
use crate::features::FeatureSet;
use crate::imagecore::{crop, resample};
use crate::rng;
use alloc::vec;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng::normal_vec(&mut rng::seeded(seed), n))
}

fn random_gray(n: usize, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    Image::new(
        1,
        n,
        n,
        (0..n * n).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect(),
    )
    .unwrap()
}

fn set(layers: &[(&str, Tensor)]) -> FeatureSet {
    FeatureSet {
        backbone: "test".into(),
        layers: layers
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
    }
}

fn eyes() -> EyeRegions {
    EyeRegions {
        left: EyeBox::new(8, 12, 26, 24),
        right: EyeBox::new(36, 12, 54, 24),
    }
}

#[test]
fn default_weights() {
    let w = LossWeights::default();
    assert_eq!(
        (w.vgg, w.face, w.eye, w.ctx, w.color),
        (1.0, 0.3, 0.1, 0.1, 1e10)
    );
    assert!(LossWeights { vgg: -1.0, ..w }.validate().is_err());
}

#[test]
fn perceptual_examples() {
    let a = set(&[
        ("l1", random_tensor(&[2, 3, 3], 1)),
        ("l2", random_tensor(&[4, 2, 2], 2)),
    ]);
    assert_eq!(perceptual_loss(&a, &a).unwrap(), 0.0);
    let c1 = set(&[("l", Tensor::full(&[3, 4, 4], 0.7))]);
    let c2 = set(&[("l", Tensor::full(&[3, 4, 4], -0.2))]);
    assert!((perceptual_loss(&c1, &c2).unwrap() - 0.81).abs() < 1e-12);

    let b = set(&[
        ("l1", random_tensor(&[2, 3, 3], 3)),
        ("l2", random_tensor(&[4, 2, 2], 4)),
    ]);
    let mut oracle = 0.0;
    for ((_, x), (_, y)) in a.layers.iter().zip(&b.layers) {
        let mut s = 0.0;
        for i in 0..x.len() {
            s += (x.data()[i] - y.data()[i]).powi(2);
        }
        oracle += s / x.len() as f64 / 2.0;
    }
    assert!((perceptual_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
    let other = FeatureSet {
        backbone: "other".into(),
        ..b.clone()
    };
    assert!(matches!(
        perceptual_loss(&a, &other),
        Err(Error::BackboneMismatch { .. })
    ));
}

#[test]
fn reconstruction_zero_and_reduction() {
    let nets = LossNetworks::toy(3);
    let input = random_gray(64, 1);
    let w = LossWeights::default();
    assert_eq!(
        reconstruction_loss(&nets, &input, &input, eyes(), w, 32).unwrap(),
        0.0
    );

    let degraded = random_gray(64, 2);
    let only_vgg = LossWeights {
        vgg: 1.0,
        face: 0.0,
        eye: 0.0,
        ..w
    };
    let got = reconstruction_loss(&nets, &input, &degraded, eyes(), only_vgg, 32).unwrap();
    let layers = nets.vgg_layers();
    let fa = nets
        .vgg
        .extract(&resample(&input, 32, 32).unwrap(), &layers)
        .unwrap();
    let fb = nets
        .vgg
        .extract(&resample(&degraded, 32, 32).unwrap(), &layers)
        .unwrap();
    assert!((got - perceptual_loss(&fa, &fb).unwrap()).abs() < 1e-12);
}

#[test]
fn reconstruction_matches_termwise_composition() {
    let nets = LossNetworks::toy(4);
    let input = random_gray(48, 5);
    let degraded = random_gray(64, 6);
    let eyes = EyeRegions {
        left: EyeBox::new(6, 10, 20, 20),
        right: EyeBox::new(27, 9, 42, 19),
    };
    let w = LossWeights {
        vgg: 0.7,
        face: 0.3,
        eye: 0.25,
        ..LossWeights::default()
    };

    let vl = nets.vgg_layers();
    let fl = nets.face_layers();
    let (fi, fd) = (
        resample(&input, 32, 32).unwrap(),
        resample(&degraded, 32, 32).unwrap(),
    );
    let vgg = perceptual_loss(
        &nets.vgg.extract(&fi, &vl).unwrap(),
        &nets.vgg.extract(&fd, &vl).unwrap(),
    )
    .unwrap();
    let face = perceptual_loss(
        &nets.face.extract(&fi, &fl).unwrap(),
        &nets.face.extract(&fd, &fl).unwrap(),
    )
    .unwrap();
    let at_input = resample(&degraded, 48, 48).unwrap();
    let mut eye = 0.0;
    for b in eyes.boxes() {
        let ci = crop(&input, b.x0, b.y0, b.x1, b.y1).unwrap();
        let cd = crop(&at_input, b.x0, b.y0, b.x1, b.y1).unwrap();
        eye += 0.5
            * perceptual_loss(
                &nets.vgg.extract(&ci, &vl).unwrap(),
                &nets.vgg.extract(&cd, &vl).unwrap(),
            )
            .unwrap();
    }
    let oracle = 0.7 * vgg + 0.3 * face + 0.25 * eye;
    let got = ReconstructionTarget::new(&nets, &input, eyes, w, 32)
        .unwrap()
        .evaluate(&degraded)
        .unwrap();
    assert!((got.total - oracle).abs() < 1e-6 * oracle.max(1.0));
    assert!((got.vgg - vgg).abs() < 1e-9 && (got.face - face).abs() < 1e-9);
}

#[test]
fn eye_boxes_outside_the_input_are_rejected() {
    let nets = LossNetworks::toy(1);
    let input = random_gray(32, 1);
    let bad = EyeRegions {
        left: EyeBox::new(0, 0, 10, 10),
        right: EyeBox::new(25, 5, 40, 12),
    };
    let err =
        ReconstructionTarget::new(&nets, &input, bad, LossWeights::default(), 32).unwrap_err();
    assert_eq!(
        err,
        Error::EyeRegionOutOfBounds {
            region: "right",
            width: 32,
            height: 32
        }
    );
    let empty = EyeRegions {
        left: EyeBox::new(5, 5, 5, 10),
        right: EyeBox::new(20, 5, 30, 12),
    };
    assert!(empty.validate(32, 32).is_err());
}

/// Explicit double-loop covariance and Huber, independent of the kernels.
fn color_oracle(out: &[Tensor], sib: &[Tensor], active: &[usize]) -> f64 {
    let cov = |t: &Tensor| {
        let (c, h, w) = t.chw();
        let n = h * w;
        let mut mean = vec![0.0; c];
        for ch in 0..c {
            for p in 0..n {
                mean[ch] += t.data()[ch * n + p] / n as f64;
            }
        }
        let mut m = vec![0.0; c * c];
        for a in 0..c {
            for b in 0..c {
                for p in 0..n {
                    m[a * c + b] +=
                        (t.data()[a * n + p] - mean[a]) * (t.data()[b * n + p] - mean[b]);
                }
                m[a * c + b] /= n as f64;
            }
        }
        m
    };
    let mut total = 0.0;
    for &l in active {
        let (a, b) = (cov(&out[l]), cov(&sib[l]));
        for i in 0..a.len() {
            let r = a[i] - b[i];
            total += if r.abs() <= 1.0 {
                0.5 * r * r
            } else {
                r.abs() - 0.5
            };
        }
    }
    total
}

fn taps(seed: u64, scale: f64) -> Vec<Tensor> {
    [4usize, 8, 16]
        .iter()
        .enumerate()
        .map(|(i, &n)| random_tensor(&[3, n, n], seed + i as u64).map(|v| v * scale))
        .collect()
}

#[test]
fn color_transfer_examples() {
    let a = taps(10, 1.0);
    assert_eq!(color_transfer_loss(&a, &a, &[0, 1, 2]).unwrap(), 0.0);

    // A spatial permutation of the same tap leaves its covariance unchanged.
    let mut shuffled = a.clone();
    let n = shuffled[2].len() / 3;
    for ch in 0..3 {
        shuffled[2].data_mut()[ch * n..(ch + 1) * n].reverse();
    }
    assert!(
        color_transfer_loss(&shuffled, &a, &[0, 1, 2])
            .unwrap()
            .abs()
            < 1e-9
    );

    for scale in [0.3, 2.5] {
        let b = taps(20, scale);
        let got = color_transfer_loss(&a, &b, &[0, 2]).unwrap();
        assert!((got - color_oracle(&a, &b, &[0, 2])).abs() < 1e-6);
    }
    assert!(color_transfer_loss(&a, &a[..2], &[0]).is_err());
    assert!(color_transfer_loss(&a, &a, &[3]).is_err());
}

#[test]
fn color_graph_form_matches_plain_form() {
    let a = taps(30, 0.8);
    let b = taps(40, 1.1);
    let reference: Vec<Vec<f64>> = b.iter().map(tap_covariance).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = a.iter().map(|t| g.param(t.clone())).collect();
    let l = color_transfer_var(&mut g, &vars, &reference, &[1, 2]).unwrap();
    assert!((g.scalar(l) - color_transfer_loss(&a, &b, &[1, 2]).unwrap()).abs() < 1e-12);
}

/// Hand-rolled contextual similarity for a handful of feature vectors.
fn contextual_oracle(src: &[[f64; 3]], tgt: &[[f64; 3]]) -> f64 {
    let mut mu = [0.0; 3];
    for t in tgt {
        for k in 0..3 {
            mu[k] += t[k] / tgt.len() as f64;
        }
    }
    let unit = |v: &[f64; 3]| {
        let c = [v[0] - mu[0], v[1] - mu[1], v[2] - mu[2]];
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        [c[0] / n, c[1] / n, c[2] / n]
    };
    let mut total = 0.0;
    for s in src {
        let u = unit(s);
        let d: Vec<f64> = tgt
            .iter()
            .map(|t| {
                let v = unit(t);
                1.0 - (u[0] * v[0] + u[1] * v[1] + u[2] * v[2])
            })
            .collect();
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d
            .iter()
            .map(|x| ((1.0 - x / (dmin + 1e-5)) / 0.5).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        total += w.iter().cloned().fold(0.0, f64::max) / sum;
    }
    -(total / src.len() as f64).ln()
}

fn vectors_to_set(v: &[[f64; 3]]) -> FeatureSet {
    let n = v.len();
    let mut data = vec![0.0; 3 * n];
    for (i, x) in v.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = x[c];
        }
    }
    set(&[("l", Tensor::new(&[3, 1, n], data))])
}

#[test]
fn contextual_matches_explicit_affinity_table() {
    let src = [[0.3, -0.2, 0.9], [1.0, 0.4, -0.5], [-0.7, 0.1, 0.2]];
    let tgt = [
        [0.2, -0.1, 1.0],
        [0.9, 0.5, -0.4],
        [-0.3, -0.8, 0.6],
        [0.0, 0.3, 0.1],
    ];
    let got = contextual_loss(&vectors_to_set(&src), &vectors_to_set(&tgt)).unwrap();
    assert!((got - contextual_oracle(&src, &tgt)).abs() < 1e-6);
}

#[test]
fn contextual_self_match_is_minimal_and_position_free() {
    let a = set(&[
        ("l1", random_tensor(&[4, 5, 5], 50)),
        ("l2", random_tensor(&[6, 3, 3], 51)),
    ]);
    let base = contextual_loss(&a, &a).unwrap();
    assert!((0.0..1e-3).contains(&base), "self loss {base}");

    let mut shuffled = a.clone();
    for (_, t) in shuffled.layers.iter_mut() {
        let (c, h, w) = t.chw();
        let n = h * w;
        for ch in 0..c {
            let plane = &mut t.data_mut()[ch * n..(ch + 1) * n];
            plane.reverse();
            plane.rotate_left(2);
        }
    }
    let b = random_tensor(&[4, 5, 5], 52);
    let other = set(&[("l1", b.clone()), ("l2", random_tensor(&[6, 3, 3], 53))]);
    let x = contextual_loss(&other, &a).unwrap();
    let y = contextual_loss(&other, &shuffled).unwrap();
    assert!((x - y).abs() < 1e-12);
    assert!((contextual_loss(&shuffled, &a).unwrap() - base).abs() < 1e-12);

    let dir = set(&[
        ("l1", random_tensor(&[4, 5, 5], 60)),
        ("l2", random_tensor(&[6, 3, 3], 61)),
    ]);
    let mut prev = base;
    for scale in [0.05, 0.2, 0.8, 3.0] {
        let mut p = a.clone();
        for ((_, t), (_, d)) in p.layers.iter_mut().zip(&dir.layers) {
            t.data_mut()
                .iter_mut()
                .zip(d.data())
                .for_each(|(v, e)| *v += scale * e);
        }
        let v = contextual_loss(&p, &a).unwrap();
        assert!(v > prev, "scale {scale}: {v} <= {prev}");
        prev = v;
    }
}

#[test]
fn contextual_rejects_mismatched_backbones() {
    let a = set(&[("l", random_tensor(&[2, 2, 2], 1))]);
    let b = FeatureSet {
        backbone: "x".into(),
        ..a.clone()
    };
    assert!(contextual_loss(&a, &b).is_err());
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let nets = LossNetworks::toy(7);
    let input = random_gray(32, 8);
    let degraded = random_gray(32, 9);
    let eyes = EyeRegions {
        left: EyeBox::new(2, 4, 14, 14),
        right: EyeBox::new(17, 4, 30, 14),
    };
    let target =
        ReconstructionTarget::new(&nets, &input, eyes, LossWeights::default(), 16).unwrap();
    let mut g = Graph::new();
    let x = g.param(degraded.tensor().clone());
    let terms = target.terms_var(&mut g, x).unwrap();
    let grads = g.backward(terms.total);
    let grad = grads.get(x).unwrap();
    let mut r = rng::seeded(11);
    for _ in 0..12 {
        let idx = (rng::uniform(&mut r, 0.0, 1.0) * 1024.0) as usize;
        let h = 1e-6;
        let mut p = degraded.clone();
        p.data_mut()[idx] += h;
        let mut m = degraded.clone();
        m.data_mut()[idx] -= h;
        let numeric =
            (target.evaluate(&p).unwrap().total - target.evaluate(&m).unwrap().total) / (2.0 * h);
        let a = grad.data()[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-9);
        assert!(rel < 1e-3, "pixel {idx}: {a} vs {numeric}");
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn color_loss_ignores_spatial_order(seed in 0u64..1000, rot in 1usize..63) {
            let a = taps(seed, 1.0);
            let b = taps(seed + 7, 0.5);
            let mut perm = a.clone();
            let n = perm[1].len() / 3;
            for ch in 0..3 {
                perm[1].data_mut()[ch * n..(ch + 1) * n].rotate_left(rot % n);
            }
            let x = color_transfer_loss(&a, &b, &[0, 1, 2]).unwrap();
            let y = color_transfer_loss(&perm, &b, &[0, 1, 2]).unwrap();
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!(x >= 0.0);
        }

        #[test]
        fn perceptual_loss_is_non_negative(seed in 0u64..1000) {
            let a = set(&[("l", random_tensor(&[2, 3, 3], seed))]);
            let b = set(&[("l", random_tensor(&[2, 3, 3], seed + 1))]);
            prop_assert!(perceptual_loss(&a, &b).unwrap() >= 0.0);
        }
    }
}
