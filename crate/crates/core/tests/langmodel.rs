use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqforge::eval::{perplexity, perplexity_from_logprob, SentenceScorer};
use seqforge::langmodel::{
    cbow_examples, cosine, export_embeddings, nearest_words, ngram_examples, Cbow, CbowConfig, Nlm, NlmConfig, RnnLm,
    RnnLmConfig,
};
use seqforge::nn::CellKind;
use seqforge::optim::{train, OptimConfig};
use seqforge::tensor::Tensor;
use seqforge::text::{TokenId, Vocabulary};

const THREE_GROUPS: [&str; 3] = [
    "There are three teams left for the qualification .",
    "four teams have passed the first round .",
    "four groups are playing in the field .",
];

fn corpus_of(lines: &[&str]) -> (Vocabulary, Vec<Vec<TokenId>>) {
    let vocab = Vocabulary::build(lines.iter().flat_map(|l| l.split_whitespace()), None, 1);
    let ids = lines.iter().map(|l| vocab.encode_line(l)).collect();
    (vocab, ids)
}

fn config(lr: f64, epochs: usize, batch: usize) -> OptimConfig {
    OptimConfig {
        learning_rate: lr,
        minibatch_size: batch,
        clip_threshold: Some(5.0),
        max_epochs: epochs,
        patience: epochs,
        eval_every: 1000,
        seed: 0,
    }
}

fn rank_of(p: &[f64], w: TokenId) -> usize {
    p.iter().filter(|&&x| x > p[w.index()]).count()
}

#[test]
fn nlm_generalizes_from_four_groups_to_three_groups() {
    let (vocab, ids) = corpus_of(&THREE_GROUPS);
    let (three, groups) = (vocab.id("three").unwrap(), vocab.id("groups").unwrap());
    let examples = ngram_examples(&ids, 2);
    for seed in 0..4 {
        let mut model = Nlm::new(
            NlmConfig {
                vocab_size: vocab.len(),
                order: 2,
                emb_dim: 8,
                hidden_dim: 8,
            },
            seed,
        )
        .unwrap();
        let before = model.predict(&[three]).unwrap()[groups.index()];
        train(&mut model, &examples, &examples, &config(0.1, 200, 8)).unwrap();
        let after = model.predict(&[three]).unwrap();
        assert!(after[groups.index()] > before, "seed {seed}: {} <= {before}", after[groups.index()]);
        assert!(rank_of(&after, groups) < 3, "seed {seed}: rank {}", rank_of(&after, groups));
        assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn nlm_context_order_matters() {
    let (vocab, ids) = corpus_of(&THREE_GROUPS);
    let examples = ngram_examples(&ids, 3);
    let mut model = Nlm::new(
        NlmConfig {
            vocab_size: vocab.len(),
            order: 3,
            emb_dim: 6,
            hidden_dim: 10,
        },
        1,
    )
    .unwrap();
    train(&mut model, &examples, &examples, &config(0.5, 200, 8)).unwrap();
    let (a, b) = (vocab.id("four").unwrap(), vocab.id("teams").unwrap());
    let forward = model.predict(&[a, b]).unwrap();
    let swapped = model.predict(&[b, a]).unwrap();
    assert!(forward.iter().zip(&swapped).any(|(x, y)| (x - y).abs() > 1e-3));
}

#[test]
fn cbow_pseudo_likelihood_properties() {
    let (vocab, ids) = corpus_of(&THREE_GROUPS);
    let v = vocab.len();
    let mut model = Cbow::new(
        CbowConfig {
            vocab_size: v,
            window: 2,
            emb_dim: 5,
        },
        0,
    )
    .unwrap();
    let e = model.store.id("emb.E").unwrap();
    model.store.value_mut(e).fill(0.0);
    let single = vocab.encode_line("four");
    assert!((model.pseudo_loglikelihood(&single).unwrap() + (v as f64).ln()).abs() < 1e-12);

    let mut model = Cbow::new(
        CbowConfig {
            vocab_size: v,
            window: 2,
            emb_dim: 5,
        },
        0,
    )
    .unwrap();
    let examples = cbow_examples(&ids, 2);
    train(&mut model, &examples, &examples, &config(0.5, 100, 8)).unwrap();
    let s = &ids[1];
    let doubled = vec![s.clone(), s.clone()];
    let (ppl_one, n_one) = model.pseudo_perplexity(std::slice::from_ref(s)).unwrap();
    let (ppl_two, n_two) = model.pseudo_perplexity(&doubled).unwrap();
    assert_eq!(n_two, 2 * n_one);
    assert!((ppl_one - ppl_two).abs() < 1e-9 * ppl_one);
    assert!((-(n_one as f64) * ppl_one.ln() - model.pseudo_loglikelihood(s).unwrap()).abs() < 1e-9);

    let left = &s[..1];
    let right = &s[2..4];
    let p = model.conditional_distribution(left, right).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let argmax = |p: &[f64]| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    let mut scaled = model.clone();
    scaled.store.value_mut(e).scale_in_place(3.0);
    let q = scaled.conditional_distribution(left, right).unwrap();
    assert_eq!(argmax(&p), argmax(&q));
    assert!(p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn rnnlm_overfits_a_repeated_sentence() {
    let (vocab, ids) = corpus_of(&["the whale swam under the ship ."]);
    let repeated: Vec<Vec<TokenId>> = std::iter::repeat_n(ids[0].clone(), 16).collect();
    for cell in [CellKind::Simple, CellKind::Gru, CellKind::Lstm] {
        let mut model = RnnLm::new(
            RnnLmConfig {
                vocab_size: vocab.len(),
                cell,
                emb_dim: 8,
                hidden_dim: 16,
            },
            0,
        )
        .unwrap();
        let before = model.sentence_logprob(&ids[0]).unwrap();
        train(&mut model, &repeated, &repeated, &config(1.0, 400, 16)).unwrap();
        let after = model.sentence_logprob(&ids[0]).unwrap();
        assert!(before < -5.0 && after > -0.1, "{cell:?}: {before} -> {after}");

        let p = perplexity(&model, &ids).unwrap();
        assert!((p.value - perplexity_from_logprob(after, ids[0].len() + 1)).abs() < 1e-9);
        let steps = model.step_distributions(&ids[0]).unwrap();
        let recomputed: f64 = steps
            .iter()
            .zip(ids[0].iter().chain([&TokenId::EOS]))
            .map(|(d, w)| d[w.index()].ln())
            .sum();
        assert!((recomputed - after).abs() < 1e-9);
    }
}

#[test]
fn rnnlm_batched_scores_match_single_sentences() {
    let (vocab, ids) = corpus_of(&THREE_GROUPS);
    let model = RnnLm::new(
        RnnLmConfig {
            vocab_size: vocab.len(),
            cell: CellKind::Lstm,
            emb_dim: 4,
            hidden_dim: 6,
        },
        5,
    )
    .unwrap();
    let refs: Vec<&[TokenId]> = ids.iter().map(Vec::as_slice).collect();
    let batched = model.batch_logprobs(&refs).unwrap();
    for (s, b) in ids.iter().zip(batched) {
        assert!((model.sentence_logprob(s).unwrap() - b).abs() < 1e-9);
    }
}

#[test]
fn neighbour_queries_and_export() {
    let table = Tensor::from_rows(&[
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![2.0, 0.1],
        vec![0.0, 1.0],
        vec![-1.0, 0.0],
    ])
    .unwrap();
    let near = nearest_words(&table, TokenId(1), 3).unwrap();
    assert_eq!(near.iter().map(|n| n.0).collect::<Vec<_>>(), vec![TokenId(2), TokenId(0), TokenId(3)]);
    assert!((near[1].1).abs() < 1e-12 && (near[2].1).abs() < 1e-12);
    assert!(nearest_words(&table, TokenId(0), 2).is_err());
    assert!(nearest_words(&table, TokenId(1), 5).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::uniform(&[1, 6], 1.0, &mut rng);
    let b = Tensor::uniform(&[1, 6], 1.0, &mut rng);
    assert!((cosine(a.data(), a.data()) - 1.0).abs() < 1e-12);
    let scaled: Vec<f64> = b.data().iter().map(|x| x * 4.5).collect();
    assert!((cosine(a.data(), b.data()) - cosine(a.data(), &scaled)).abs() < 1e-12);

    let vocab = Vocabulary::build(["x"], None, 1);
    let text = export_embeddings(&vocab, &table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "5 2");
    assert_eq!(lines[2], "<s> 1.000000 0.000000");
    assert_eq!(lines.len(), 6);
}
