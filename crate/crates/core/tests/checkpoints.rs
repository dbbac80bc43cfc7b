use seqforge::autodiff::ParamStore;
use seqforge::checkpoint::{Checkpoint, ModelKind, SavedModel};
use seqforge::eval::SentenceScorer;
use seqforge::langmodel::{RnnLm, RnnLmConfig};
use seqforge::nn::CellKind;
use seqforge::tensor::Tensor;
use seqforge::text::{TokenId, Vocabulary};
use seqforge::translate::{greedy_decode, Arch, NmtConfig, NmtModel};

fn vocab() -> Vocabulary {
    Vocabulary::build("the whale and the sea".split(' '), None, 1)
}

fn rnnlm(seed: u64) -> RnnLm {
    RnnLm::new(
        RnnLmConfig {
            vocab_size: vocab().len(),
            cell: CellKind::Gru,
            emb_dim: 3,
            hidden_dim: 5,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn loaded_models_score_like_the_originals() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lm.ckpt");
    let model = rnnlm(7);
    SavedModel::RnnLm(model.clone(), vocab()).save(&path).unwrap();
    let SavedModel::RnnLm(loaded, v) = SavedModel::load(&path).unwrap() else { panic!("wrong kind") };
    assert_eq!(v, vocab());
    let s = v.encode_line("the sea and the whale");
    let (a, b) = (model.sentence_logprob(&s).unwrap(), loaded.sentence_logprob(&s).unwrap());
    assert!((a - b).abs() < 1e-5 * a.abs(), "{a} vs {b}");

    let nmt = NmtModel::new(
        NmtConfig {
            src_vocab_size: v.len(),
            tgt_vocab_size: v.len(),
            arch: Arch::Attention,
            cell: CellKind::Lstm,
            dim: 4,
            emb_dim: 3,
            att_dim: 2,
        },
        9,
    )
    .unwrap();
    let path = dir.path().join("nmt.ckpt");
    SavedModel::Nmt {
        model: nmt.clone(),
        src_vocab: v.clone(),
        tgt_vocab: v.clone(),
    }
    .save(&path)
    .unwrap();
    let SavedModel::Nmt { model: back, .. } = SavedModel::load(&path).unwrap() else { panic!("wrong kind") };
    assert_eq!(back.config, nmt.config);
    let src = [TokenId(4), TokenId(5), TokenId(6)];
    let x = greedy_decode(&nmt.provider(&src).unwrap(), 8).unwrap();
    let y = greedy_decode(&back.provider(&src).unwrap(), 8).unwrap();
    assert_eq!(x.tokens, y.tokens);
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = SavedModel::RnnLm(rnnlm(1), vocab()).to_checkpoint().unwrap().to_bytes().unwrap();
    for cut in 0..bytes.len() {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "prefix of {cut} bytes accepted");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.ckpt");
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(SavedModel::load(&path).is_err());
    assert!(SavedModel::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn shape_and_name_mismatches_are_errors() {
    let model = rnnlm(2);
    let mut ck = SavedModel::RnnLm(model.clone(), vocab()).to_checkpoint().unwrap();
    assert_eq!(ck.kind, ModelKind::RnnLm);
    let (_, t) = &mut ck.tensors[0];
    *t = Tensor::zeros(&[t.len() + 1]);
    let mut store: ParamStore = model.store.clone();
    assert!(ck.apply_to(&mut store).is_err());
    assert!(SavedModel::from_checkpoint(&ck).is_err());

    let mut ck = SavedModel::RnnLm(model.clone(), vocab()).to_checkpoint().unwrap();
    ck.tensors[0].0 = "nope".to_string();
    assert!(SavedModel::from_checkpoint(&ck).is_err());

    let mut ck = SavedModel::RnnLm(model, vocab()).to_checkpoint().unwrap();
    ck.hyper.remove("hidden_dim");
    assert!(SavedModel::from_checkpoint(&ck).is_err());
}
