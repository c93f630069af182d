use pagelm::encoder::{EncoderConfig, LayoutContext, LayoutMode, MlmConfig};
use pagelm::parallel::Exec;
use pagelm::pipeline::{pretrain, prepare_pages, train_vocab, Page, RunSpec};
use pagelm::synthcorpus::{gen_documents, GenSpec};

fn setup(steps: u64) -> (Vec<Page>, RunSpec) {
    let docs: Vec<_> = gen_documents(&GenSpec::default(), 24, 0, Exec::Parallel)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("d{i}"), d))
        .collect();
    let vocab = train_vocab(&docs, 400).unwrap();
    let pages = prepare_pages(&docs, &vocab, &LayoutContext::new(LayoutMode::Winding, None), Exec::Parallel).unwrap();
    let spec = RunSpec {
        encoder: EncoderConfig {
            n: 32,
            layers: 2,
            heads: 2,
            ffn: 64,
            max_len: 256,
            vocab_size: vocab.len(),
            ..Default::default()
        },
        mlm: MlmConfig {
            steps,
            batch_size: 8,
            ..Default::default()
        },
        finetune: Default::default(),
    };
    (pages, spec)
}

#[test]
fn first_step_loss_is_near_uniform() {
    let (pages, spec) = setup(1);
    let pre = pretrain(&pages, &spec, Exec::Parallel).unwrap();
    let uniform = (spec.encoder.vocab_size as f64).ln();
    let l0 = pre.log[0].loss;
    assert!((l0 - uniform).abs() < 0.1 * uniform, "step 0 loss {l0} vs ln V {uniform}");
}

#[test]
fn same_seed_same_checkpoint() {
    let (pages, spec) = setup(3);
    let a = pretrain(&pages, &spec, Exec::Parallel).unwrap();
    let b = pretrain(&pages, &spec, Exec::Sequential).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.len(), 3);
    let mut other = spec.clone();
    other.mlm.seed += 1;
    assert_ne!(pretrain(&pages, &other, Exec::Parallel).unwrap().params, a.params);
}

#[test]
fn loss_falls_over_a_short_run() {
    let (pages, mut spec) = setup(60);
    spec.mlm.peak_lr = 3e-3;
    let log = pretrain(&pages, &spec, Exec::Parallel).unwrap().log;
    let head: f64 = log[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    let tail: f64 = log[log.len() - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}
