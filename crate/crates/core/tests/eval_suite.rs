use hyperclip::data::{class_name, prompt_text, NUM_CLASSES};
use hyperclip::eval::*;
use hyperclip::image_encoder::{argmax_rows, scores};
use hyperclip::model::{Model, ModelConfig, ModelMode};
use hyperclip::persist::classifier_to_checkpoint;
use hyperclip::tensor::Tensor;
use proptest::prelude::*;

mod common;
use common::{brute_recall, brute_worst_group};

fn model(mode: ModelMode, seed: u64) -> Model {
    let mut cfg = ModelConfig::default();
    cfg.mode = mode;
    Model::new(cfg, seed).unwrap()
}

fn all_classes() -> PromptSet {
    PromptSet::synthetic(&(0..NUM_CLASSES).collect::<Vec<_>>()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn retrieval_equals_brute_force(
        sim in proptest::collection::vec(-3i8..4, 100),
        labels in proptest::collection::vec(0usize..4, 10),
    ) {
        // coarse integer scores make ties common; caption c is correct for
        // every image that shares its label
        let sim: Vec<f32> = sim.into_iter().map(f32::from).collect();
        let truth: Vec<Vec<usize>> = (0..10).map(|c| (0..10).filter(|&i| labels[i] == labels[c]).collect()).collect();
        let r = retrieval_metrics(&Tensor::new(vec![10, 10], sim.clone()).unwrap(), &truth).unwrap();
        let (ir, tr) = brute_recall(&sim, 10, 10, &truth);
        prop_assert_eq!(r.image_recall, ir);
        prop_assert_eq!(r.text_recall, tr);
        prop_assert_eq!(r.mean_recall, 0.5 * (ir + tr));
    }

    #[test]
    fn worst_group_equals_brute_force(
        pred in proptest::collection::vec(0usize..3, 24),
        labels in proptest::collection::vec(0usize..3, 24),
        groups in proptest::collection::vec(0usize..3, 21),
    ) {
        // first three samples pin every group non-empty
        let groups: Vec<usize> = [0, 1, 2].into_iter().chain(groups).collect();
        let w = worst_group_accuracy(&pred, &labels, &groups, 3).unwrap();
        prop_assert_eq!(w, brute_worst_group(&pred, &labels, &groups, 3));
        prop_assert!(w <= accuracy(&pred, &labels));
    }

    #[test]
    fn argmax_ignores_positive_scaling(
        s in proptest::collection::vec(-10.0f32..10.0, 12),
        c in 0.01f32..100.0,
    ) {
        let scaled: Vec<f32> = s.iter().map(|v| v * c).collect();
        // a scaled tie can only stay a tie or resolve the same way when
        // the originals are distinct
        let distinct = s.chunks(4).all(|r| {
            let mut v = r.to_vec();
            v.sort_by(f32::total_cmp);
            v.windows(2).all(|w| w[1] - w[0] > 1e-3)
        });
        prop_assume!(distinct);
        prop_assert_eq!(argmax_rows(&s, 4), argmax_rows(&scaled, 4));
    }
}

#[test]
fn classify_examples() {
    let y = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
    assert_eq!(argmax_rows(scores(&x, &y).unwrap().data(), 2), vec![0]);
    assert_eq!(argmax_rows(&[0.0, 0.0, 0.0], 3), vec![0]);
}

#[test]
fn exported_classifier_matches_the_full_pipeline() {
    let set = held_out_set(5, 512, &Default::default(), 16).unwrap();
    for mode in ModelMode::ALL {
        let m = model(mode, 2);
        let prompts = all_classes();
        m.counters.reset();
        let clf = derive_zero_shot(&m, &prompts).unwrap();
        assert_eq!(m.counters.text(), 1);
        assert!(m.counters.hyper() <= 1);
        let y = class_embeddings(&m, &prompts).unwrap();
        let norms = m.norms_for(&y).unwrap();
        let full = argmax_rows(scores(&m.embed_images(&norms, &set.images).unwrap(), &y).unwrap().data(), NUM_CLASSES);
        assert_eq!(clf.classify(&set.images).unwrap(), full, "{mode}");
        let baseline = model(ModelMode::Baseline, 2);
        let base_enc = baseline.fixed_image_params().count("") + baseline.params.require("image.norms").unwrap().numel();
        assert_eq!(clf.encoder_parameter_count(), base_enc);
    }
}

#[test]
fn derivation_is_deterministic() {
    let m = model(ModelMode::HyperClip, 4);
    let a = classifier_to_checkpoint(&derive_zero_shot(&m, &all_classes()).unwrap()).to_bytes();
    let b = classifier_to_checkpoint(&derive_zero_shot(&m, &all_classes()).unwrap()).to_bytes();
    assert_eq!(a, b);
}

#[test]
fn permuting_classes_permutes_the_head() {
    let m = model(ModelMode::HyperClip, 6);
    let order: Vec<usize> = (0..NUM_CLASSES).rev().collect();
    let fwd = derive_zero_shot(&m, &all_classes()).unwrap();
    let rev = derive_zero_shot(&m, &PromptSet::synthetic(&order).unwrap()).unwrap();
    for (r, &c) in order.iter().enumerate() {
        assert_eq!(rev.head.row(r), fwd.head.row(c));
        assert_eq!(rev.class_names[r], class_name(c));
    }
    // the hypernet sees a permuted set, which it is invariant to
    assert_eq!(rev.norms.flat(), fwd.norms.flat());
    let set = held_out_set(1, 64, &Default::default(), 16).unwrap();
    let a = fwd.classify(&set.images).unwrap();
    let b: Vec<usize> = rev.classify(&set.images).unwrap().into_iter().map(|r| order[r]).collect();
    assert_eq!(a, b);
}

#[test]
fn disjoint_tasks_get_different_norms() {
    let m = model(ModelMode::HyperClip, 3);
    let a = derive_zero_shot(&m, &PromptSet::synthetic(&[0, 1, 2, 3]).unwrap()).unwrap();
    let b = derive_zero_shot(&m, &PromptSet::synthetic(&[8, 9, 10, 11]).unwrap()).unwrap();
    let d = a.norms.flat().iter().zip(b.norms.flat()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(d > 0.0);
}

#[test]
fn ensembled_prompts_average_then_renormalize() {
    let m = model(ModelMode::Baseline, 0);
    let text = format!(
        "{a}\t{pa}\n{a}\ta {a}\n{b}\t{pb}\n",
        a = class_name(0),
        pa = prompt_text(0),
        b = class_name(5),
        pb = prompt_text(5)
    );
    let single = class_embeddings(&m, &PromptSet::synthetic(&[0, 5]).unwrap()).unwrap();
    let ens = class_embeddings(&m, &PromptSet::parse(&text).unwrap()).unwrap();
    assert_eq!(ens.row(1), single.row(1));
    let n: f32 = ens.row(0).iter().map(|v| v * v).sum();
    assert!((n - 1.0).abs() < 1e-5);
    assert_ne!(ens.row(0), single.row(0));
}

#[test]
fn probe_protocol_edges() {
    let m = model(ModelMode::Baseline, 1);
    let prompts = all_classes();
    let (train, test) = probe_split(1, 256, &Default::default(), 16).unwrap();
    let zero = ProbeConfig {
        epochs: 0,
        ..Default::default()
    };
    let r = linear_probe(&m, &prompts, &train, &test, &zero).unwrap();
    assert_eq!(r.accuracy, r.zero_shot_accuracy);
    let cfg = ProbeConfig {
        epochs: 2,
        ..Default::default()
    };
    let probe = linear_probe(&m, &prompts, &train, &test, &cfg).unwrap();
    let frozen = norm_finetune_upper_bound(&m, &prompts, &train, &test, &cfg, true).unwrap();
    assert!((probe.accuracy - frozen.accuracy).abs() <= 1e-6);
    assert_eq!(probe.head, frozen.head);
    let upper = norm_finetune_upper_bound(&m, &prompts, &train, &test, &cfg, false).unwrap();
    assert_ne!(upper.norms.flat(), frozen.norms.flat());
    // a class missing from the training split
    let few = PromptSet::synthetic(&(0..NUM_CLASSES).collect::<Vec<_>>()).unwrap();
    let (small, _) = probe_split(1, 8, &Default::default(), 16).unwrap();
    assert!(linear_probe(&m, &few, &small, &test, &cfg).is_err());
    // upper bound is a baseline-only protocol
    let h = model(ModelMode::HyperClip, 1);
    assert!(norm_finetune_upper_bound(&h, &prompts, &train, &test, &cfg, false).is_err());
}

#[test]
fn report_text_round_trips() {
    let m = model(ModelMode::HyperClip, 0);
    let set = held_out_set(0, 64, &Default::default(), 16).unwrap();
    let r = evaluate(&m, &set, NUM_CLASSES).unwrap();
    assert_eq!(r.samples, 64);
    assert!(r.get("worst_group").unwrap() <= r.get("zeroshot_acc").unwrap());
    let back = EvalReport::parse(&r.to_text()).unwrap();
    assert_eq!(back, r);
    for line in r.to_text().lines() {
        assert_eq!(line.split('\t').count(), 2);
    }
}
