use super::*;
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch(
    preset: EncoderPreset,
    side: usize,
    feature: usize,
    heads: usize,
    styles: usize,
) -> ArchConfig {
    ArchConfig {
        preset,
        encoder: EncoderOptions::new(side, feature),
        embed_dim: side,
        num_heads: heads,
        num_styles: styles,
        seed: 11,
    }
}

fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![side, side],
        (0..side * side)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Scalar objective evaluated by forward passes only.
#[derive(Clone, Copy)]
struct Objective {
    classifier: bool,
    global: bool,
    kway: f64,
}

fn objective(
    params: &ModelParams,
    eps: &[f64],
    image: &Tensor,
    sel: Classifier<'_>,
    t: Targets,
    obj: Objective,
) -> f64 {
    let b = params.forward(eps, image, sel).unwrap();
    let mut total = 0.0;
    if obj.classifier {
        total += cross_entropy(&b.subpop_logits, t.preference).unwrap().0;
    }
    if obj.global {
        total += cross_entropy(&b.global_logits, t.preference).unwrap().0;
    }
    if obj.kway > 0.0 {
        total += obj.kway * cross_entropy(&b.kway_logits, t.style).unwrap().0;
    }
    total
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

const H: f64 = 1e-5;

fn fd_embedding(
    params: &ModelParams,
    eps: &[f64],
    image: &Tensor,
    sel: Classifier<'_>,
    t: Targets,
    obj: Objective,
) -> Vec<f64> {
    (0..eps.len())
        .map(|i| {
            let mut p = eps.to_vec();
            p[i] += H;
            let up = objective(params, &p, image, sel, t, obj);
            p[i] -= 2.0 * H;
            let down = objective(params, &p, image, sel, t, obj);
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Central differences over selected entries of one block.
fn fd_block(
    params: &ModelParams,
    block: usize,
    entries: &[usize],
    eps: &[f64],
    image: &Tensor,
    sel_head: Option<usize>,
    t: Targets,
    obj: Objective,
) -> Vec<f64> {
    entries
        .iter()
        .map(|&e| {
            let mut p = params.clone();
            let sel = |_p: &ModelParams| match sel_head {
                Some(k) => Classifier::Subpop(k),
                None => Classifier::Global,
            };
            *p.blocks_mut()[block].flat_params_mut().nth(e).unwrap() += H;
            let up = objective(&p, eps, image, sel(&p), t, obj);
            *p.blocks_mut()[block].flat_params_mut().nth(e).unwrap() -= 2.0 * H;
            let down = objective(&p, eps, image, sel(&p), t, obj);
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn pick(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n.min(len)).map(|_| rng.random_range(0..len)).collect()
}

/// Runs the whole battery of gradient checks on one random instance and
/// returns the worst relative error.
fn check_instance(
    preset: EncoderPreset,
    side: usize,
    feature: usize,
    seed: u64,
    source: EmbeddingGradSource,
) -> f64 {
    let mut a = arch(preset, side, feature, 3, 4);
    a.seed = seed;
    let params = build_model(&a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..side).map(|_| rng.random_range(0.0..1.0)).collect();
    let image = random_image(side, &mut rng);
    let t = Targets {
        preference: rng.random_range(0..2),
        style: rng.random_range(0..4),
    };
    let k = rng.random_range(0..3);
    let spec = LossSpec {
        kway_weight: 0.7,
        train_global_head: true,
        embedding: Some(source),
    };
    let bundle = params.forward(&eps, &image, Classifier::Subpop(k)).unwrap();
    let mut grads = ModelGrads::zeros(&params);
    let out = model_backward(
        &params,
        Classifier::Subpop(k),
        &bundle,
        t,
        &spec,
        &mut grads,
    )
    .unwrap();

    let mut worst: f64 = 0.0;
    let emb_obj = Objective {
        classifier: source == EmbeddingGradSource::GlobalAndClassifier,
        global: true,
        kway: 0.0,
    };
    let fd = fd_embedding(&params, &eps, &image, Classifier::Subpop(k), t, emb_obj);
    worst = worst.max(rel_err(&out.embedding_grad, &fd));

    let enc_obj = Objective {
        classifier: true,
        global: false,
        kway: 0.7,
    };
    let entries = pick(params.encoder.num_params(), 24, &mut rng);
    let fd = fd_block(&params, 0, &entries, &eps, &image, Some(k), t, enc_obj);
    let an: Vec<f64> = entries
        .iter()
        .map(|&e| *flat(&grads.encoder).nth(e).unwrap())
        .collect();
    worst = worst.max(rel_err(&an, &fd));

    let head_len = params.subpop_heads[k].num_params();
    let entries = pick(head_len, 24, &mut rng);
    let cls_obj = Objective {
        classifier: true,
        global: false,
        kway: 0.0,
    };
    let fd = fd_block(&params, 1 + k, &entries, &eps, &image, Some(k), t, cls_obj);
    let an: Vec<f64> = entries
        .iter()
        .map(|&e| *flat(&grads.classifier).nth(e).unwrap())
        .collect();
    worst = worst.max(rel_err(&an, &fd));

    let glob_obj = Objective {
        classifier: false,
        global: true,
        kway: 0.0,
    };
    let fd = fd_block(&params, 4, &entries, &eps, &image, Some(k), t, glob_obj);
    let an: Vec<f64> = entries
        .iter()
        .map(|&e| *flat(&grads.global).nth(e).unwrap())
        .collect();
    worst = worst.max(rel_err(&an, &fd));

    let kway_obj = Objective {
        classifier: false,
        global: false,
        kway: 0.7,
    };
    let entries = pick(params.kway_head.num_params(), 24, &mut rng);
    let fd = fd_block(&params, 5, &entries, &eps, &image, Some(k), t, kway_obj);
    let an: Vec<f64> = entries
        .iter()
        .map(|&e| *flat(&grads.kway).nth(e).unwrap())
        .collect();
    worst.max(rel_err(&an, &fd))
}

#[test]
fn mnist_preset_head_widths() {
    let p = build_model(&arch(EncoderPreset::MnistConv, 28, 64, 10, 10)).unwrap();
    assert_eq!(p.head_input_dim(), 92);
    for h in &p.subpop_heads {
        assert_eq!(h.input_shape(), &[92]);
        assert_eq!(h.output_len(), 2);
    }
    assert_eq!(p.global_head.output_len(), 2);
    assert_eq!(p.kway_head.input_shape(), &[92]);
    assert_eq!(p.kway_head.output_len(), 10);
    let eps = vec![0.5; 28];
    let img = Tensor::zeros(&[28, 28]);
    let b = p.forward(&eps, &img, Classifier::Subpop(3)).unwrap();
    assert_eq!(b.kway_logits.len(), 10);
    assert_eq!(b.feature.len(), 64);
}

#[test]
fn small_mlp_dimension_arithmetic() {
    let mut a = arch(EncoderPreset::SmallMlp, 4, 8, 2, 2);
    a.embed_dim = 4;
    let p = build_model(&a).unwrap();
    assert_eq!(p.head_input_dim(), 12);
}

#[test]
fn embed_dim_must_match_image_side() {
    let mut a = arch(EncoderPreset::SmallMlp, 4, 8, 2, 2);
    a.embed_dim = 5;
    assert!(build_model(&a).unwrap_err().is_config());
    let img = Tensor::zeros(&[3, 3]);
    assert!(embed_input(&img, &[1.0, 2.0]).unwrap_err().is_config());
}

#[test]
fn same_seed_builds_identical_models() {
    let a = arch(EncoderPreset::SyntheticConv, 28, 32, 4, 4);
    assert_eq!(build_model(&a).unwrap(), build_model(&a).unwrap());
    let mut b = a.clone();
    b.seed += 1;
    assert_ne!(build_model(&a).unwrap(), build_model(&b).unwrap());
}

#[test]
fn embed_input_places_embedding_on_diagonal() {
    let img = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let x = embed_input(&img, &[1.0, 2.0]).unwrap();
    assert_eq!(x.shape(), &[2, 2, 2]);
    assert_eq!(x.data(), &[0.1, 0.2, 0.3, 0.4, 1.0, 0.0, 0.0, 2.0]);
    let z = embed_input(&img, &[0.0, 0.0]).unwrap();
    assert!(z.data()[4..].iter().all(|&v| v == 0.0));
    assert_eq!(diagonal_positions(2), vec![4, 7]);
}

#[test]
fn hand_traced_forward_on_single_pixel() {
    // side 1, 2 features: dense(2 -> 2), layernorm(2), relu, then heads on 3 inputs.
    let mut a = arch(EncoderPreset::SmallMlp, 1, 2, 2, 2);
    a.embed_dim = 1;
    let mut p = build_model(&a).unwrap();
    {
        let enc = p.encoder.params_mut();
        // layer 0 is flatten, layer 1 dense, layer 2 layernorm
        enc[1][0].data_mut().copy_from_slice(&[1.0, 2.0, -1.0, 0.5]);
        enc[1][1].data_mut().copy_from_slice(&[0.0, 0.1]);
        enc[2][0].data_mut().copy_from_slice(&[2.0, 1.0]);
        enc[2][1].data_mut().copy_from_slice(&[0.5, 0.0]);
    }
    p.subpop_heads[1].params_mut()[0][0]
        .data_mut()
        .copy_from_slice(&[1.0, 0.0, 1.0, 0.0, 1.0, -1.0]);
    p.subpop_heads[1].params_mut()[0][1]
        .data_mut()
        .copy_from_slice(&[0.0, 0.25]);

    let x = 0.5;
    let e = 0.3;
    let img = Tensor::new(vec![1, 1], vec![x]).unwrap();
    // dense: z = W [x, e] + b
    let z0 = 1.0 * x + 2.0 * e;
    let z1 = -x + 0.5 * e + 0.1;
    let mean = (z0 + z1) / 2.0;
    let var = ((z0 - mean).powi(2) + (z1 - mean).powi(2)) / 2.0;
    let inv = 1.0 / (var + crate::nn::LAYER_NORM_EPS).sqrt();
    let f0 = (2.0 * (z0 - mean) * inv + 0.5).max(0.0);
    let f1 = (1.0 * (z1 - mean) * inv).max(0.0);
    let expected = [f0 + e, f1 - e + 0.25];

    let b = p.forward(&[e], &img, Classifier::Subpop(1)).unwrap();
    for (got, want) in b.subpop_logits.iter().zip(expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn swapping_embedding_changes_every_head() {
    let p = build_model(&arch(EncoderPreset::SmallMlp, 4, 6, 2, 3)).unwrap();
    let img = Tensor::filled(&[4, 4], 0.5);
    let a = p
        .forward(&[0.1, 0.2, 0.3, 0.4], &img, Classifier::Subpop(0))
        .unwrap();
    let b = p
        .forward(&[0.9, 0.1, 0.5, 0.0], &img, Classifier::Subpop(0))
        .unwrap();
    assert_ne!(a.subpop_logits, b.subpop_logits);
    assert_ne!(a.global_logits, b.global_logits);
    assert_ne!(a.kway_logits, b.kway_logits);
}

#[test]
fn head_index_out_of_range_is_usage_error() {
    let p = build_model(&arch(EncoderPreset::SmallMlp, 4, 6, 2, 3)).unwrap();
    let img = Tensor::zeros(&[4, 4]);
    let err = p
        .forward(&[0.0; 4], &img, Classifier::Subpop(2))
        .unwrap_err();
    assert!(matches!(err, FedError::Usage(_)));
}

#[test]
fn kway_weight_only_touches_encoder_and_kway() {
    let p = build_model(&arch(EncoderPreset::SmallMlp, 4, 6, 2, 3)).unwrap();
    let img = Tensor::filled(&[4, 4], 0.25);
    let eps = [0.2, 0.4, 0.6, 0.8];
    let t = Targets {
        preference: 1,
        style: 2,
    };
    let run = |w: f64| {
        let spec = LossSpec {
            kway_weight: w,
            train_global_head: true,
            embedding: Some(EmbeddingGradSource::Global),
        };
        let b = p.forward(&eps, &img, Classifier::Subpop(1)).unwrap();
        let mut g = ModelGrads::zeros(&p);
        let out = model_backward(&p, Classifier::Subpop(1), &b, t, &spec, &mut g).unwrap();
        (g, out)
    };
    let (on, out_on) = run(1.0);
    let (off, out_off) = run(0.0);
    assert_eq!(on.classifier, off.classifier);
    assert_eq!(on.global, off.global);
    assert_eq!(out_on.embedding_grad, out_off.embedding_grad);
    assert_ne!(on.encoder, off.encoder);
    assert!(flat(&off.kway).all(|&v| v == 0.0));
}

#[test]
fn frozen_embedding_reports_no_gradient() {
    let p = build_model(&arch(EncoderPreset::SmallMlp, 4, 6, 2, 3)).unwrap();
    let img = Tensor::filled(&[4, 4], 0.25);
    let spec = LossSpec {
        kway_weight: 0.0,
        train_global_head: false,
        embedding: None,
    };
    let b = p.forward(&[0.0; 4], &img, Classifier::Global).unwrap();
    let mut g = ModelGrads::zeros(&p);
    let out = model_backward(
        &p,
        Classifier::Global,
        &b,
        Targets {
            preference: 0,
            style: 0,
        },
        &spec,
        &mut g,
    )
    .unwrap();
    assert!(out.embedding_grad.is_empty());
    assert!(flat(&g.global).any(|&v| v != 0.0));
    assert!(flat(&g.classifier).all(|&v| v == 0.0));
}

#[test]
fn global_classifier_embedding_gradient_matches_finite_differences() {
    let p = build_model(&arch(EncoderPreset::SmallMlp, 5, 6, 2, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(5, &mut rng);
    let eps: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
    let t = Targets {
        preference: 1,
        style: 0,
    };
    let spec = LossSpec {
        kway_weight: 0.0,
        train_global_head: true,
        embedding: Some(EmbeddingGradSource::Global),
    };
    let b = p.forward(&eps, &img, Classifier::Global).unwrap();
    let mut g = ModelGrads::zeros(&p);
    let out = model_backward(&p, Classifier::Global, &b, t, &spec, &mut g).unwrap();
    let obj = Objective {
        classifier: true,
        global: false,
        kway: 0.0,
    };
    let fd = fd_embedding(&p, &eps, &img, Classifier::Global, t, obj);
    assert!(rel_err(&out.embedding_grad, &fd) < 1e-4);
}

#[test]
fn local_head_must_have_head_shape() {
    let p = build_model(&arch(EncoderPreset::SmallMlp, 4, 6, 2, 3)).unwrap();
    let wrong = head_network(7, 2).unwrap();
    let img = Tensor::zeros(&[4, 4]);
    assert!(p
        .forward(&[0.0; 4], &img, Classifier::Local(&wrong))
        .is_err());
    let right = head_network(10, 2).unwrap();
    assert!(p
        .forward(&[0.0; 4], &img, Classifier::Local(&right))
        .is_ok());
}

#[test]
fn mnist_preset_gradients_match_finite_differences() {
    let worst = check_instance(
        EncoderPreset::MnistConv,
        28,
        64,
        3,
        EmbeddingGradSource::Global,
    );
    assert!(worst < 1e-4, "worst relative error {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn full_model_gradients_match_finite_differences(
        seed in 0u64..1_000_000,
        conv in any::<bool>(),
        both in any::<bool>(),
    ) {
        let source = if both {
            EmbeddingGradSource::GlobalAndClassifier
        } else {
            EmbeddingGradSource::Global
        };
        let worst = if conv {
            check_instance(EncoderPreset::SyntheticConv, 6, 5, seed, source)
        } else {
            check_instance(EncoderPreset::SmallMlp, 4, 5, seed, source)
        };
        prop_assert!(worst < 1e-4, "worst relative error {}", worst);
    }
}
