use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use micl_core::autograd::Graph;
use micl_core::config::ModelDims;
use micl_core::ikd::{ikd_loss, sample_batch, InstructionSet};
use micl_core::losses::ce_var;
use micl_core::model::ModelState;
use micl_core::optim::AdamW;
use micl_core::syndata::{generate_task_dataset, SplitSizes};
use micl_core::trainer::{build_vocabulary, sample_input};
use micl_core::{Modality, TaskDescriptor, TaskType, Vocabulary};

fn dims() -> ModelDims {
    ModelDims { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, context: 48, rank: 2, feat_dim: 8 }
}

fn setup() -> (Vocabulary, Vec<Vec<usize>>, micl_core::syndata::TaskDataset) {
    let ins = InstructionSet::bundled(0);
    let vocab = build_vocabulary(&ins.instructions).unwrap();
    let enc = ins.encode(&vocab).unwrap();
    let desc = TaskDescriptor::new(1, Modality::Image, TaskType::Captioning, 10);
    let ds = generate_task_dataset(&desc, SplitSizes { train: 16, val: 2, test: 2 }, 3).unwrap();
    (vocab, enc, ds)
}

/// Plain cross-entropy steps on the given tensors.
fn fit(model: &mut ModelState, ids: &[usize], inputs: &[micl_core::model::SeqInput], steps: usize, lr: f64) {
    let mask = model.mask(ids);
    let mut opt = AdamW::new(0.0);
    for _ in 0..steps {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, inputs, &mask).unwrap();
        let loss = ce_var(&mut g, &fwd);
        let grads = g.backward(loss);
        opt.step(model, &grads, lr);
    }
}

#[test]
fn adapter_training_without_distillation_drifts_on_instructions() {
    let (vocab, enc, ds) = setup();
    let old = ModelState::new(dims(), vocab.len(), 1).unwrap();
    let mut model = old.snapshot();
    let inputs: Vec<_> = ds.train.iter().take(4).map(|s| sample_input(&vocab, s).unwrap()).collect();
    let batch = sample_batch(&enc, 8, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(ikd_loss(&model, &old, &batch).unwrap(), 0.0);
    let ids = model.adapter_ids();
    fit(&mut model, &ids, &inputs, 200, 2e-3);
    let drift = ikd_loss(&model, &old, &batch).unwrap();
    assert!(drift > 0.0, "instruction divergence {drift}");
}

#[test]
fn overfitting_one_sample_reproduces_its_target() {
    let (vocab, _, ds) = setup();
    let mut model = ModelState::new(dims(), vocab.len(), 2).unwrap();
    let s = &ds.train[0];
    let input = sample_input(&vocab, s).unwrap();
    let ids = model.task_trainable_ids(Modality::Image);
    fit(&mut model, &ids, std::slice::from_ref(&input), 400, 1e-2);
    let out = model.generate_greedy(input.payload, &input.prompt, 16).unwrap();
    assert_eq!(vocab.decode(&out).unwrap(), s.target_text, "prompt {}", s.input_text);
}

#[test]
fn snapshot_is_untouched_by_training() {
    let (vocab, _, ds) = setup();
    let mut model = ModelState::new(dims(), vocab.len(), 4).unwrap();
    let snap = model.snapshot();
    let before = snap.content_hash();
    let inputs: Vec<_> = ds.train.iter().take(4).map(|s| sample_input(&vocab, s).unwrap()).collect();
    let ids = model.task_trainable_ids(Modality::Image);
    fit(&mut model, &ids, &inputs, 100, 1e-2);
    assert_eq!(snap.content_hash(), before);
    assert_ne!(model.content_hash(), before);
}
