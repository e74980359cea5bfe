use clnet::boxes::View;
use clnet::config::ModelConfig;
use clnet::model::init_parameters;
use clnet::synth::{generate_case, GenConfig};
use clnet::vild::{detection_heads, encode_views, vild_decode, DetectionSet};
use clnet::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(seed: u64, size: usize) -> (Tensor, Tensor) {
    let cfg = GenConfig {
        image_size: size,
        min_radius: 1.5,
        max_radius: 2.5,
        ..GenConfig::default()
    };
    let s = generate_case(seed, &cfg).unwrap();
    (s.img_c.to_tensor(), s.img_m.to_tensor())
}

fn decode(params: &ParamStore, cfg: &ModelConfig, c: &Tensor, m: &Tensor) -> [Tensor; 2] {
    let mut g = Graph::new(params);
    let tokens = encode_views(&mut g, cfg, c, m).unwrap();
    let (views, _) = vild_decode(&mut g, cfg, tokens, false).unwrap();
    [g.value(views[0].e).clone(), g.value(views[1].e).clone()]
}

/// Fills every inter-attention output projection with random weights.
fn activate_inter(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().filter(|n| n.contains(".inter_") && n.ends_with(".wo")).cloned().collect();
    assert!(!names.is_empty());
    for n in names {
        let shape = params.get(&n).unwrap().shape().to_vec();
        params.insert(n, Tensor::uniform(&shape, 0.3, &mut rng));
    }
}

#[test]
fn identical_views_give_identical_tokens() {
    let cfg = ModelConfig::tiny();
    let p = init_parameters(&cfg, 0).unwrap();
    let (c, _) = images(5, cfg.image_size);
    let mut g = Graph::new(&p);
    let t = encode_views(&mut g, &cfg, &c, &c).unwrap();
    assert_eq!(g.value(t[0].0), g.value(t[1].0));

    let zero = Tensor::zeros(&[1, cfg.image_size, cfg.image_size]);
    let t = encode_views(&mut g, &cfg, &zero, &zero).unwrap();
    assert!(g.value(t[0].0).is_finite());
}

#[test]
fn wrong_resolution_is_a_shape_error() {
    let cfg = ModelConfig::tiny();
    let p = init_parameters(&cfg, 0).unwrap();
    let mut g = Graph::new(&p);
    let img = Tensor::zeros(&[1, 8, 8]);
    let e = encode_views(&mut g, &cfg, &img, &img).unwrap_err();
    assert!(e.to_string().contains("shape"), "{e}");
}

#[test]
fn zero_inter_projection_matches_decoder_without_inter_attention() {
    let cfg = ModelConfig::tiny();
    let p = init_parameters(&cfg, 1).unwrap();
    let off = ModelConfig {
        inter_attention: false,
        ..cfg.clone()
    };
    let (c, m) = images(2, cfg.image_size);
    assert_eq!(decode(&p, &cfg, &c, &m), decode(&p, &off, &c, &m));
}

#[test]
fn tied_weights_make_the_decoder_view_symmetric() {
    let cfg = ModelConfig {
        tie_inter_weights: true,
        ..ModelConfig::tiny()
    };
    let mut p = init_parameters(&cfg, 4).unwrap();
    activate_inter(&mut p, 9);
    for name in ["query", "pos"] {
        let t = p.get(&format!("dec.cc.{name}")).unwrap().clone();
        p.insert(format!("dec.mlo.{name}"), t);
    }
    let (c, m) = images(3, cfg.image_size);
    let fwd = decode(&p, &cfg, &c, &m);
    let swapped = decode(&p, &cfg, &m, &c);
    assert_eq!(fwd[0], swapped[1]);
    assert_eq!(fwd[1], swapped[0]);
    assert_ne!(fwd[0], fwd[1]);
}

#[test]
fn cross_view_path_exists_only_with_inter_attention() {
    let cfg = ModelConfig::tiny();
    let mut p = init_parameters(&cfg, 6).unwrap();
    let (c, m) = images(8, cfg.image_size);
    let mut m2 = m.clone();
    for v in m2.data_mut().iter_mut().step_by(3) {
        *v = 1.0 - *v;
    }
    let off = ModelConfig {
        inter_attention: false,
        ..cfg.clone()
    };
    assert_eq!(decode(&p, &off, &c, &m)[0], decode(&p, &off, &c, &m2)[0]);

    activate_inter(&mut p, 1);
    let a = decode(&p, &cfg, &c, &m)[0].clone();
    let b = decode(&p, &cfg, &c, &m2)[0].clone();
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-6, "CC embeddings insensitive to MLO image: {diff}");
}

#[test]
fn decoder_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let p = init_parameters(&cfg, 2).unwrap();
    let (c, m) = images(1, cfg.image_size);
    let a = decode(&p, &cfg, &c, &m);
    let b = decode(&p, &cfg, &c, &m);
    assert_eq!(a, b);
}

#[test]
fn zero_embeddings_give_reference_determined_boxes_and_equal_scores() {
    let cfg = ModelConfig::tiny();
    let p = init_parameters(&cfg, 0).unwrap();
    let n = cfg.num_queries;
    let mut g = Graph::new(&p);
    let e = g.constant(Tensor::zeros(&[n, cfg.model_dim]));
    let r = g.param("dec.cc.ref").unwrap();
    let h = detection_heads(&mut g, "head", e, r, cfg.activation).unwrap();
    let d = DetectionSet::read(&g, h, e, View::Cc).unwrap();
    let refs = p.get("dec.cc.ref").unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for (i, b) in d.boxes.iter().enumerate() {
        assert!((b.cx - sig(refs.get2(i, 0))).abs() < 1e-12);
        assert!((b.cy - sig(refs.get2(i, 1))).abs() < 1e-12);
        assert_eq!((b.w, b.h), (d.boxes[0].w, d.boxes[0].h));
        assert_eq!(d.scores[i], d.scores[0]);
    }
}

#[test]
fn head_outputs_stay_in_range_for_random_embeddings() {
    let cfg = ModelConfig::tiny();
    let p = init_parameters(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let mut g = Graph::new(&p);
        let e = g.constant(Tensor::uniform(&[cfg.num_queries, cfg.model_dim], 3.0, &mut rng));
        let r = g.param("dec.mlo.ref").unwrap();
        let h = detection_heads(&mut g, "head", e, r, cfg.activation).unwrap();
        let d = DetectionSet::read(&g, h, e, View::Mlo).unwrap();
        for (b, s) in d.boxes.iter().zip(&d.scores) {
            assert!((0.0..=1.0).contains(s));
            assert!(b.w > 0.0 && b.w < 1.0 && b.h > 0.0 && b.h < 1.0);
        }
    }
}
