use gatelab::backbone::{EncoderConfig, FrozenEncoder};
use gatelab::gating::GatingStrategy;
use gatelab::objective::classification_loss;
use gatelab::rng;
use gatelab::variant::{build_variant, count_parameters, Mode, PromptModel, VariantKind, VariantSpec};
use gatelab_autodiff::{Graph, ParamGroup};

fn build(kind: VariantKind) -> PromptModel {
    build_variant(&VariantSpec::of(kind), &EncoderConfig::default(), 1).unwrap()
}

#[test]
fn adaptive_adds_exactly_the_gate_logits() {
    let enc = EncoderConfig::default();
    let adaptive = count_parameters(&build(VariantKind::AdaptiveBimaple));
    let bimaple = count_parameters(&build(VariantKind::Bimaple));
    let expected = enc.depth * enc.max_prompt_len + enc.depth;
    assert_eq!(expected, 36);
    assert_eq!(adaptive.group(ParamGroup::Gate), 36);
    assert_eq!(adaptive.total - bimaple.total, expected);
}

#[test]
fn per_layer_strategy_has_one_length_gate_per_layer() {
    let spec = VariantSpec::of(VariantKind::AdaptiveBimaple).with_strategy(GatingStrategy::PerLayer);
    let audit = count_parameters(&build_variant(&spec, &EncoderConfig::default(), 1).unwrap());
    assert_eq!(audit.group(ParamGroup::Gate), 8);
}

#[test]
fn ungated_kinds_have_no_gate_parameters() {
    for kind in [VariantKind::Maple, VariantKind::Bimaple, VariantKind::Coop, VariantKind::Cocoop, VariantKind::ExplicitReg] {
        let audit = count_parameters(&build(kind));
        assert_eq!(audit.group(ParamGroup::Gate), 0, "{kind}");
        assert_eq!(audit.group(ParamGroup::GateNet), 0, "{kind}");
    }
}

#[test]
fn parameter_matched_total_equals_adaptive_total() {
    let matched = build(VariantKind::ParamMatched);
    let adaptive = count_parameters(&build(VariantKind::AdaptiveBimaple));
    assert_eq!(count_parameters(&matched).total, adaptive.total);
    assert!(matched.gates.is_none());
    let buffer = matched.buffer.as_ref().unwrap();
    assert_eq!(buffer.group(), ParamGroup::Prompt);
    assert_eq!(buffer.numel(), 36);
}

#[test]
fn always_frozen_gates_keep_their_init_and_get_no_gradient() {
    let model = build(VariantKind::AlwaysFrozen);
    let gates = model.gates.as_ref().unwrap();
    for p in gates.parameters() {
        assert!(p.is_frozen());
        assert!(p.value.data().iter().all(|&v| v == 1.0));
    }
    let audit = count_parameters(&model);
    assert_eq!(audit.frozen, 36);

    let enc = FrozenEncoder::new(EncoderConfig::default()).unwrap();
    let classes = enc.class_inputs(&[0, 1, 2]).unwrap();
    let c = enc.config();
    let patches = rng::gaussian(&mut rng::stream(2, "x"), &[3, c.n_patch_tokens, c.vision_width], 1.0);
    let mut r = rng::stream(3, "masks");
    let g = Graph::new();
    let out = model.forward(&g, &enc, &classes, &patches, Mode::Train(&mut r)).unwrap();
    let loss = classification_loss(&g, out.logits, &[0, 1, 2], 0.0).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.group_norm(ParamGroup::Gate), 0.0);
    assert!(grads.group_norm(ParamGroup::Prompt) > 0.0);
}

#[test]
fn gated_coop_has_one_gate_per_context_token() {
    let audit = count_parameters(&build(VariantKind::CoopGated));
    assert_eq!(audit.group(ParamGroup::Gate), VariantSpec::default().context_len);
    let cocoop = build(VariantKind::CocoopGated);
    let heads = cocoop.cocoop.as_ref().unwrap().heads.as_ref().unwrap();
    assert!(heads[0].value.data().iter().all(|&w| w == 0.0));
    assert!(heads[1].value.data().iter().all(|&b| b == 1.0));
}

#[test]
fn instance_gates_vary_across_inputs_once_heads_are_nonzero() {
    let mut model = build(VariantKind::CocoopGated);
    let heads = model.cocoop.as_mut().unwrap().heads.as_mut().unwrap();
    heads[0].value = rng::gaussian(&mut rng::stream(4, "w"), heads[0].value.shape(), 1.0);

    let enc = FrozenEncoder::new(EncoderConfig::default()).unwrap();
    let classes = enc.class_inputs(&[0, 1]).unwrap();
    let c = enc.config();
    let patches = rng::gaussian(&mut rng::stream(5, "x"), &[6, c.n_patch_tokens, c.vision_width], 1.0);
    let g = Graph::new();
    let out = model.forward(&g, &enc, &classes, &patches, Mode::Infer).unwrap();
    let l_eff = out.gates.per_input_l_eff.unwrap();
    let m = l_eff.iter().sum::<f64>() / l_eff.len() as f64;
    let var = l_eff.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / l_eff.len() as f64;
    assert!(var > 0.0);
}

#[test]
fn unknown_kind_is_a_config_error() {
    let err = VariantKind::parse("mega-maple").unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("mega-maple"));
}

#[test]
fn kind_names_round_trip() {
    for kind in VariantKind::ALL {
        assert_eq!(VariantKind::parse(kind.as_str()).unwrap(), kind);
    }
}

#[test]
fn construction_is_deterministic() {
    let a = build(VariantKind::AdaptiveBimaple);
    let b = build(VariantKind::AdaptiveBimaple);
    for (x, y) in a.parameters().iter().zip(b.parameters()) {
        assert_eq!(x.value, y.value);
    }
}
