use gatelab::backbone::{logits, score, EncoderConfig, FrozenEncoder, InsertWeight, Insertion};
use gatelab::rng;
use gatelab_autodiff::{Graph, ParamGroup, Tensor};

fn encoder() -> FrozenEncoder {
    FrozenEncoder::new(EncoderConfig::default()).unwrap()
}

fn prompt_tensors(enc: &FrozenEncoder, seed: u64, width: usize) -> Vec<Tensor> {
    let n = enc.config().max_prompt_len;
    (0..enc.config().depth)
        .map(|d| rng::gaussian(&mut rng::stream(seed, &format!("p{d}")), &[n, width], 1.0))
        .collect()
}

#[derive(Clone, Copy)]
enum Tower {
    Text,
    Vision,
}

fn input(enc: &FrozenEncoder, tower: Tower) -> Tensor {
    match tower {
        Tower::Text => enc.class_inputs(&[0, 1, 2]).unwrap(),
        Tower::Vision => {
            let c = enc.config();
            rng::gaussian(&mut rng::stream(9, "patches"), &[3, c.n_patch_tokens, c.vision_width], 1.0)
        }
    }
}

fn width(enc: &FrozenEncoder, tower: Tower) -> usize {
    match tower {
        Tower::Text => enc.config().text_width,
        Tower::Vision => enc.config().vision_width,
    }
}

/// Encodes `input` with `prompts[d]` inserted at weight `weights[d]`.
fn encode(enc: &FrozenEncoder, tower: Tower, prompts: &[Tensor], weights: &[f64]) -> Tensor {
    let g = Graph::new();
    let x = g.constant(input(enc, tower)).unwrap();
    let ins: Vec<Option<Insertion>> = prompts
        .iter()
        .zip(weights)
        .map(|(p, &w)| {
            Some(Insertion {
                prompts: g.constant(p.clone()).unwrap(),
                weight: InsertWeight::Const(w),
            })
        })
        .collect();
    let out = match tower {
        Tower::Text => enc.encode_text(&g, &ins, x),
        Tower::Vision => enc.encode_image(&g, &ins, x),
    };
    g.value(out.unwrap()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn full_weights_respond_to_prompts_at_every_layer() {
    let enc = encoder();
    for tower in [Tower::Text, Tower::Vision] {
        let w = width(&enc, tower);
        let base = prompt_tensors(&enc, 1, w);
        let reference = encode(&enc, tower, &base, &[1.0; 4]);
        for d in 0..enc.config().depth {
            let mut changed = base.clone();
            changed[d] = prompt_tensors(&enc, 2, w)[d].clone();
            let out = encode(&enc, tower, &changed, &[1.0; 4]);
            assert!(max_diff(&reference, &out) > 1e-6, "layer {d} prompts ignored");
        }
    }
}

#[test]
fn zero_weights_ignore_deeper_prompts() {
    let enc = encoder();
    for tower in [Tower::Text, Tower::Vision] {
        let w = width(&enc, tower);
        let a = prompt_tensors(&enc, 1, w);
        let mut b = prompt_tensors(&enc, 2, w);
        b[0] = a[0].clone();
        let weights = [1.0, 0.0, 0.0, 0.0];
        let ea = encode(&enc, tower, &a, &weights);
        let eb = encode(&enc, tower, &b, &weights);
        assert_eq!(ea, eb);
    }
}

#[test]
fn zeroed_first_slice_with_closed_gates_ignores_prompt_values() {
    let enc = encoder();
    for tower in [Tower::Text, Tower::Vision] {
        let w = width(&enc, tower);
        let mut a = prompt_tensors(&enc, 3, w);
        let mut b = prompt_tensors(&enc, 4, w);
        a[0] = Tensor::zeros(a[0].shape());
        b[0] = Tensor::zeros(b[0].shape());
        let weights = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(encode(&enc, tower, &a, &weights), encode(&enc, tower, &b, &weights));
    }
}

#[test]
fn soft_insertion_lies_apart_from_both_hard_outputs() {
    let enc = encoder();
    for tower in [Tower::Text, Tower::Vision] {
        let p = prompt_tensors(&enc, 5, width(&enc, tower));
        let on = encode(&enc, tower, &p, &[1.0; 4]);
        let off = encode(&enc, tower, &p, &[1.0, 0.0, 0.0, 0.0]);
        let half = encode(&enc, tower, &p, &[1.0, 0.5, 0.5, 0.5]);
        assert!(max_diff(&on, &off) > 1e-6);
        assert!(max_diff(&half, &on) > 1e-9);
        assert!(max_diff(&half, &off) > 1e-9);
    }
}

#[test]
fn embeddings_have_unit_norm() {
    let enc = encoder();
    for tower in [Tower::Text, Tower::Vision] {
        let p = prompt_tensors(&enc, 6, width(&enc, tower));
        let out = encode(&enc, tower, &p, &[1.0, 0.3, 0.0, 1.0]);
        let dim = enc.config().embed_dim;
        for row in out.data().chunks(dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "norm {norm}");
        }
    }
    for c in enc.class_embeddings(&[0, 5, 9]).unwrap() {
        let norm = c.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn construction_is_deterministic_and_frozen() {
    let a = encoder();
    let b = encoder();
    let (pa, pb) = (a.parameters(), b.parameters());
    assert_eq!(pa.len(), pb.len());
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(x.value, y.value, "{}", x.name());
        assert!(x.is_frozen());
        assert_eq!(x.group(), ParamGroup::Backbone);
    }
    let p = prompt_tensors(&a, 7, a.config().text_width);
    assert_eq!(encode(&a, Tower::Text, &p, &[1.0; 4]), encode(&b, Tower::Text, &p, &[1.0; 4]));

    let other = FrozenEncoder::new(EncoderConfig {
        seed: 1,
        ..EncoderConfig::default()
    })
    .unwrap();
    assert_ne!(a.parameters()[0].value, other.parameters()[0].value);
}

#[test]
fn prompts_of_wrong_width_are_rejected() {
    let enc = encoder();
    let g = Graph::new();
    let x = g.constant(input(&enc, Tower::Text)).unwrap();
    let bad = g.constant(Tensor::zeros(&[8, 7])).unwrap();
    assert!(enc.encode_text(&g, &[Some(Insertion::replace(bad))], x).is_err());
}

fn basis(dim: usize, i: usize) -> Vec<f64> {
    (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
}

#[test]
fn scores_of_orthogonal_classes() {
    let classes: Vec<Vec<f64>> = (0..4).map(|i| basis(4, i)).collect();
    assert_eq!(score(&basis(4, 0), &classes, 1.0).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn scale_doubles_scores_and_keeps_argmax() {
    let mut r = rng::stream(11, "scores");
    let unit = |t: Tensor| {
        let n = t.l2_norm();
        t.data().iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let image = unit(rng::gaussian(&mut r, &[8], 1.0));
    let classes: Vec<Vec<f64>> = (0..5).map(|_| unit(rng::gaussian(&mut r, &[8], 1.0))).collect();
    let one = score(&image, &classes, 1.0).unwrap();
    let two = score(&image, &classes, 2.0).unwrap();
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    for (a, b) in one.iter().zip(&two) {
        assert_eq!(*b, 2.0 * a);
    }
    assert_eq!(argmax(&one), argmax(&two));

    // Brute-force dot products against the graph version.
    let g = Graph::new();
    let img = g.constant(Tensor::new(vec![1, 8], image.clone()).unwrap()).unwrap();
    let cls = g
        .constant(Tensor::new(vec![5, 8], classes.concat()).unwrap())
        .unwrap();
    let z = g.value(logits(&g, img, cls, 3.0).unwrap()).unwrap();
    for (c, class) in classes.iter().enumerate() {
        let dot: f64 = image.iter().zip(class).map(|(a, b)| a * b).sum();
        assert!((z.data()[c] - 3.0 * dot).abs() < 1e-12);
    }
}

#[test]
fn empty_class_list_is_an_error() {
    assert!(score(&[1.0, 0.0], &[], 1.0).is_err());
    let g = Graph::new();
    let img = g.constant(Tensor::zeros(&[1, 2])).unwrap();
    let cls = g.constant(Tensor::zeros(&[0, 2])).unwrap();
    assert!(logits(&g, img, cls, 1.0).is_err());
}
