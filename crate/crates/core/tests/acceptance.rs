//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use kbrerank::config::PipelineConfig;
use kbrerank::corpus::{Corpus, FoldAssignment, Sentence, Vocabulary};
use kbrerank::eval::{self, NBestList, ScorerMode};
use kbrerank::features::{
    self, cooccurrence_total, extract_features, npmi_bin_with_table, COOCCURRENCE_BINS, FREQUENCY_BINS, NPMI_BINS,
};
use kbrerank::kb::{KbEntry, KbIndex, WordPairTable};
use kbrerank::negsampler::{sample_negatives, ConfusionTable, SamplerConfig};
use kbrerank::neural::optim::ParamSet;
use kbrerank::neural::reranker::{self, RerankerDims, RerankerParams};
use kbrerank::neural::tensor::softmax;
use kbrerank::ngram::{self, NGramModel};
use kbrerank::synth::{generate_world, SynthConfig, SynthWorld};
use kbrerank::trainer::{self, Candidate, LstmLmParams, TrainingInstance};
use kbrerank::util::seeded_rng;
use kbrerank::{pipeline, Result};
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn s(x: &str) -> Sentence {
    Sentence::parse(x).unwrap()
}

fn small_world(seed: u64, n_train: usize) -> SynthWorld {
    generate_world(&SynthConfig {
        seed,
        n_artists: 60,
        n_songs_per_artist: 4,
        word_inventory: 400,
        n_train,
        n_heldout: 100,
        n_test: 100,
        ..Default::default()
    })
    .unwrap()
}

fn random_bundle<R: Rng>(rng: &mut R) -> features::FeatureBundle {
    features::FeatureBundle {
        ngram_negative_logprob: rng.random_range(0.0..30.0),
        cooccurrence_bin: rng.random_range(0..COOCCURRENCE_BINS),
        artist_freq_bin: rng.random_range(0..FREQUENCY_BINS),
        song_freq_bin: rng.random_range(0..FREQUENCY_BINS),
        cross_npmi_bin: rng.random_range(0..NPMI_BINS),
        intra_npmi_bin: rng.random_range(0..NPMI_BINS),
    }
}

fn contrastive_objective(p: &RerankerParams, inst: &TrainingInstance) -> f64 {
    let us: Vec<f64> = inst
        .candidates
        .iter()
        .map(|c| reranker::score_u(p, &c.ids, &c.bundle).unwrap())
        .collect();
    reranker::contrastive_loss(&us, 0).unwrap().0
}

fn gradient_check() -> Outcome {
    let dims = RerankerDims {
        d_emb: 5,
        lstm_dim: 8,
        d_m: 3,
        d_f: 3,
        d_xp: 3,
        d_ip: 3,
        d_hidden: 8,
        init_scale: 0.3,
        alpha_init: [0.5, 0.5],
    };
    let mut rng = seeded_rng(101, 0);
    let mut params = RerankerParams::init(dims, 20, &mut rng);
    params.alpha.data_mut().copy_from_slice(&[0.7, -0.2]);
    let cands: Vec<Candidate> = (0..6)
        .map(|_| {
            let len = rng.random_range(3..7);
            Candidate {
                ids: (0..len).map(|_| rng.random_range(0..20)).collect(),
                bundle: random_bundle(&mut rng),
            }
        })
        .collect();
    let inst = TrainingInstance { candidates: cands };
    let mut grad = params.zeros_like();
    trainer::instance_loss_grad(&params, &inst, 0.0, &mut rng, &mut grad).map_err(|e| e.to_string())?;
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut q = params.clone();
    for (ti, name) in reranker::TENSOR_NAMES.iter().enumerate() {
        let n = q.tensors()[ti].data().len();
        let mut numeric = vec![0.0; n];
        for (k, num) in numeric.iter_mut().enumerate() {
            let orig = q.tensors()[ti].data()[k];
            q.tensors_mut()[ti].data_mut()[k] = orig + eps;
            let up = contrastive_objective(&q, &inst);
            q.tensors_mut()[ti].data_mut()[k] = orig - eps;
            let down = contrastive_objective(&q, &inst);
            q.tensors_mut()[ti].data_mut()[k] = orig;
            *num = (up - down) / (2.0 * eps);
        }
        let analytic = grad.tensors()[ti].data();
        let diff: f64 = numeric.iter().zip(analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na == 0.0 && nn == 0.0 {
            continue;
        }
        let rel = diff / na.max(nn);
        ensure(rel < 1e-4, format!("{name}: relative error {rel:.2e}"))?;
        worst = worst.max(rel);
    }
    Ok(format!("15 tensors, worst relative error {worst:.2e}"))
}

fn normalization() -> Outcome {
    let mut rng = seeded_rng(102, 0);
    let mut worst_soft = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let p = softmax(&scores);
        worst_soft = worst_soft.max((p.iter().sum::<f64>() - 1.0).abs());
        let (loss, _) = reranker::contrastive_loss(&scores, 0).map_err(|e| e.to_string())?;
        ensure((loss + p[0].ln()).abs() < 1e-9, "loss is not -log of the softmax")?;
    }
    ensure(worst_soft <= 1e-12, format!("softmax sums off by {worst_soft:.2e}"))?;

    let world = small_world(7, 2000);
    let vocab = Vocabulary::build(&world.train, 1).unwrap();
    let lm = NGramModel::train(&world.train, &vocab, 3, None, None).unwrap();
    let events = lm.events();
    let mut contexts = lm.contexts(3);
    contexts.extend(lm.contexts(2));
    let mut worst_ng = 0.0f64;
    for _ in 0..100 {
        let ctx = &contexts[rng.random_range(0..contexts.len())];
        let ctx: Vec<&str> = ctx.iter().map(String::as_str).collect();
        let total: f64 = events.iter().map(|w| lm.conditional(&ctx, w)).sum();
        worst_ng = worst_ng.max((total - 1.0).abs());
    }
    ensure(worst_ng <= 1e-6, format!("n-gram sums off by {worst_ng:.2e}"))?;

    let lstm = LstmLmParams::init(vocab.size(), 8, 8, 0.08, &mut rng);
    let n = lstm.num_outputs() as f64;
    for prefix in [&[][..], &[1u32, 2, 3][..]] {
        ensure(
            lstm.next_distribution(prefix).iter().all(|&p| p == 1.0 / n),
            "untrained LSTM LM is not uniform",
        )?;
    }
    Ok(format!(
        "softmax {worst_soft:.1e}, n-gram {worst_ng:.1e} over 100 contexts, LSTM LM uniform over {n} events"
    ))
}

/// Best (errors, insertions, deletions, substitutions) over every edit
/// sequence turning `r` into `h`, by exhaustive enumeration.
fn brute_edit(r: &[String], h: &[String]) -> (usize, usize, usize, usize) {
    fn go(r: &[String], h: &[String], acc: (usize, usize, usize, usize), best: &mut (usize, usize, usize, usize)) {
        if r.is_empty() && h.is_empty() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if !r.is_empty() && !h.is_empty() {
            let sub = usize::from(r[0] != h[0]);
            go(&r[1..], &h[1..], (acc.0 + sub, acc.1, acc.2, acc.3 + sub), best);
        }
        if !h.is_empty() {
            go(r, &h[1..], (acc.0 + 1, acc.1 + 1, acc.2, acc.3), best);
        }
        if !r.is_empty() {
            go(&r[1..], h, (acc.0 + 1, acc.1, acc.2 + 1, acc.3), best);
        }
    }
    let mut best = (usize::MAX, 0, 0, 0);
    go(r, h, (0, 0, 0, 0), &mut best);
    best
}

fn all_sequences(max_len: usize) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for w in ["a", "b", "c"] {
                let mut s: Vec<String> = seq.clone();
                s.push(w.to_string());
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let seqs = all_sequences(5);
    let mut pairs = 0;
    for r in &seqs {
        for h in &seqs {
            if r.is_empty() {
                ensure(eval::wer(r, h).is_err(), "empty reference accepted")?;
                continue;
            }
            let c = eval::wer(r, h).map_err(|e| e.to_string())?;
            let (e, ins, del, sub) = brute_edit(r, h);
            ensure(
                (c.errors(), c.insertions, c.deletions, c.substitutions) == (e, ins, del, sub),
                format!("{r:?} vs {h:?}"),
            )?;
            pairs += 1;
        }
    }

    let world = small_world(8, 500);
    let lists: Vec<NBestList> = world.test.iter().take(100).cloned().collect();
    let oracle = eval::oracle_wer(&lists).map_err(|e| e.to_string())?;
    let mut errors = 0;
    for (l, u) in lists.iter().zip(&oracle.utterances) {
        let r = l.reference.as_ref().unwrap().tokens();
        let errs: Vec<usize> = l.hypotheses.iter().map(|h| brute_edit(r, h.tokens.tokens()).0).collect();
        let best = *errs.iter().min().unwrap();
        let first = errs.iter().position(|&e| e == best).unwrap();
        ensure(u.chosen == first && u.counts.errors() == best, format!("utterance {}", l.id))?;
        errors += best;
    }
    ensure(errors == oracle.totals.errors(), "oracle totals")?;

    // Three utterances: every combination of choices.
    let three = &lists[..3];
    let sizes: Vec<usize> = three.iter().map(|l| l.hypotheses.len()).collect();
    let mut best_total = usize::MAX;
    for a in 0..sizes[0] {
        for b in 0..sizes[1] {
            for c in 0..sizes[2] {
                let total: usize = [a, b, c]
                    .iter()
                    .zip(three)
                    .map(|(&i, l)| brute_edit(l.reference.as_ref().unwrap().tokens(), l.hypotheses[i].tokens.tokens()).0)
                    .sum();
                best_total = best_total.min(total);
            }
        }
    }
    let o3 = eval::oracle_wer(three).map_err(|e| e.to_string())?;
    ensure(o3.totals.errors() == best_total, "three-utterance oracle")?;
    Ok(format!("{pairs} sequence pairs, 100 utterances, 3-utterance enumeration"))
}

/// Co-occurrence total by scanning the KB for every pair of disjoint spans.
fn brute_cooccurrence(sentence: &Sentence, kb: &[KbEntry]) -> u64 {
    let t = sentence.tokens();
    let l = t.len();
    let mut total = 0;
    for i1 in 0..l {
        for j1 in i1..l {
            for i2 in j1 + 1..l {
                for j2 in i2..l {
                    let (x, y) = (&t[i1..=j1], &t[i2..=j2]);
                    total += kb.iter().filter(|e| e.artist == x && e.song == y).count() as u64;
                    total += kb.iter().filter(|e| e.song == x && e.artist == y).count() as u64;
                }
            }
        }
    }
    total
}

fn feature_bounds() -> Outcome {
    let world = small_world(9, 500);
    let index = KbIndex::build(world.kb.clone()).unwrap();
    let mut words: Vec<String> = world.kb.iter().flat_map(|e| e.artist.iter().chain(&e.song).cloned()).collect();
    words.extend(["play", "by", "download", "the", "zzz"].map(String::from));
    let mut rng = seeded_rng(104, 0);
    let mut checked_cooc = 0;
    for n in 0..1000 {
        // Half the sentences splice real KB names together so spans match.
        let sent = if n % 2 == 0 {
            let a = &world.kb[rng.random_range(0..world.kb.len())];
            let b = &world.kb[rng.random_range(0..world.kb.len())];
            let mut t = b.song.clone();
            t.push("by".into());
            t.extend(a.artist.iter().cloned());
            if rng.random_bool(0.5) {
                t.extend(a.song.iter().cloned());
            }
            Sentence::new(t).unwrap()
        } else {
            let len = rng.random_range(1..13);
            Sentence::new((0..len).map(|_| words[rng.random_range(0..words.len())].clone()).collect()).unwrap()
        };
        let lp = -rng.random_range(0.0..100.0);
        let b = extract_features(&sent, lp, &index).map_err(|e| e.to_string())?;
        b.validate().map_err(|e| e.to_string())?;
        ensure(
            b.cooccurrence_bin < 10 && b.artist_freq_bin < 100 && b.song_freq_bin < 100,
            "bin out of range",
        )?;
        ensure(b.cross_npmi_bin < 100 && b.intra_npmi_bin < 100, "npmi bin out of range")?;
        if sent.len() <= 8 {
            let fast = cooccurrence_total(&sent, &index);
            ensure(fast == brute_cooccurrence(&sent, &world.kb), format!("co-occurrence of {sent}"))?;
            checked_cooc += 1;
        }
    }

    let mut t = WordPairTable::new(["a".into(), "b".into()], false);
    t.observe("a", "b");
    ensure(npmi_bin_with_table(&s("a b"), &t) == 99, "perfect association bin")?;
    ensure(npmi_bin_with_table(&s("x y"), &t) == 0, "unseen words bin")?;
    ensure(npmi_bin_with_table(&s("a"), &t) == 50, "single word bin")?;
    let mut t = WordPairTable::new(["a".into(), "b".into()], false);
    for (x, y) in [("a", "b"), ("a", "b"), ("a", "a"), ("b", "b")] {
        t.observe(x, y);
    }
    ensure(npmi_bin_with_table(&s("a b"), &t) == 50, "independence bin")?;
    Ok(format!("1000 sentences in range, {checked_cooc} co-occurrence totals match, NPMI bins 0/50/99"))
}

fn negative_sampling_contract() -> Outcome {
    let world = small_world(10, 1000);
    let vocab = Vocabulary::build(&world.train, 0).unwrap();
    let lm = NGramModel::train(&world.train, &vocab, 3, None, None).unwrap();
    let table = ConfusionTable::build(&vocab);
    let cfg = SamplerConfig::default();
    let run = || -> Result<Vec<String>> {
        world
            .train
            .sentences
            .iter()
            .enumerate()
            .map(|(i, src)| {
                let set = sample_negatives(src, &table, &lm, &cfg, 1000 + i as u64)?;
                Ok(serde_json::to_string(&set.negatives)?)
            })
            .collect()
    };
    let first = run().map_err(|e| e.to_string())?;
    let mut kept = 0;
    for (i, src) in world.train.sentences.iter().enumerate() {
        let set = sample_negatives(src, &table, &lm, &cfg, 1000 + i as u64).unwrap();
        ensure(!set.negatives.is_empty() && set.negatives.len() <= 5, format!("count for {src}"))?;
        let mut seen = std::collections::BTreeSet::new();
        for (k, n) in set.negatives.iter().enumerate() {
            ensure(n.tokens.len() == src.len(), "length changed")?;
            ensure(!n.substituted_positions.is_empty(), "no substitution")?;
            ensure(seen.insert(n.tokens.clone()), "duplicate negative")?;
            ensure(n.lm_logprob == lm.score_sentence(&n.tokens), "stale LM score")?;
            if k > 0 {
                ensure(set.negatives[k - 1].lm_logprob >= n.lm_logprob, "not LM-descending")?;
            }
            for p in 0..src.len() {
                let (a, b) = (&src.tokens()[p], &n.tokens.tokens()[p]);
                if n.substituted_positions.contains(&p) {
                    ensure(table.candidates(a).contains(b), format!("{b} is not confusable with {a}"))?;
                } else {
                    ensure(a == b, "unrecorded change")?;
                }
            }
            kept += 1;
        }
    }
    ensure(run().map_err(|e| e.to_string())? == first, "regeneration differs")?;
    Ok(format!("1000 sentences, {kept} negatives, regeneration identical"))
}

fn jackknife_leakage() -> Outcome {
    let mut lines: Vec<String> = (0..40).map(|i| format!("play song{} by artist{}", i % 7, i % 5)).collect();
    lines[13] = "play zyzzyva by artist3".into();
    let corpus = Corpus::from_text(&lines.join("\n"), "leak").unwrap();
    let vocab = Vocabulary::build(&corpus, 0).unwrap();
    let folds = FoldAssignment::assign(&corpus, 4, 3).unwrap();
    let models = ngram::train_jackknife_models(&corpus, &vocab, &folds, 3).unwrap();
    let full = NGramModel::train(&corpus, &vocab, 3, None, None).unwrap();
    let jk = &models[folds.fold_of(13)];
    let sent = &corpus.sentences[13];
    let as_unk = s("play qqqqq by artist3");
    ensure(!jk.knows("zyzzyva"), "jackknife model saw the held-out word")?;
    ensure(jk.score_sentence(sent) == jk.score_sentence(&as_unk), "jackknife score differs from UNK")?;
    ensure(full.knows("zyzzyva"), "full model lost the word")?;
    ensure(full.score_sentence(sent) != full.score_sentence(&as_unk), "full model scores the word as UNK")?;
    let scores = ngram::jackknife_scores(&corpus, &vocab, &folds, 3).unwrap();
    ensure(scores[13] == jk.score_sentence(sent), "jackknife_scores disagrees")?;
    Ok(format!(
        "jackknife {:.3} = UNK, full model {:.3}",
        scores[13],
        full.score_sentence(sent)
    ))
}

fn fixture_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.set_seed(2024);
    cfg.paths.out_dir = dir.to_path_buf();
    cfg.reranker = RerankerDims {
        d_emb: 32,
        lstm_dim: 32,
        d_m: 8,
        d_f: 8,
        d_xp: 8,
        d_ip: 8,
        d_hidden: 32,
        ..Default::default()
    };
    cfg.train.lr = 0.2;
    cfg.train.max_epochs = 8;
    cfg.train.patience = 3;
    cfg.lstm_lm.d_emb = 32;
    cfg.lstm_lm.hidden = 64;
    cfg.lstm_lm.train.max_epochs = 4;
    cfg.lstm_lm.train.dropout = 0.0;
    cfg
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

struct EndToEnd {
    rows: Vec<eval::SummaryRow>,
    files: BTreeMap<String, Vec<u8>>,
    cfg: PipelineConfig,
    secs: f64,
}

fn end_to_end(dir: &Path) -> std::result::Result<EndToEnd, String> {
    let cfg = fixture_config(dir);
    let t = Instant::now();
    let rows = pipeline::run_all(&cfg).map_err(|e| e.to_string())?;
    Ok(EndToEnd {
        rows,
        files: read_dir(dir),
        cfg,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn test_wer(rows: &[eval::SummaryRow], model: &str) -> f64 {
    rows.iter().find(|r| r.model == model).map(|r| r.test_wer).unwrap_or(f64::NAN)
}

fn directional(run: &EndToEnd) -> Outcome {
    let w = |m| test_wer(&run.rows, m);
    let (oracle, both, rr, fp) = (w("oracle"), w("reranker+lstm"), w("reranker"), w("first-pass"));
    let detail = format!(
        "oracle {:.2}% <= reranker+lstm {:.2}% <= reranker {:.2}% <= first-pass {:.2}% (ngram {:.2}%, lstm {:.2}%), {:.0}s",
        100.0 * oracle,
        100.0 * both,
        100.0 * rr,
        100.0 * fp,
        100.0 * w("ngram"),
        100.0 * w("lstm"),
        run.secs
    );
    ensure(oracle <= both && both <= rr && rr <= fp, format!("ordering violated: {detail}"))?;
    ensure(rr <= 0.9 * fp, format!("reranker gain below 10%: {detail}"))?;
    ensure(run.secs < 1800.0, format!("too slow: {detail}"))?;
    Ok(detail)
}

fn early_stopping(run: &EndToEnd) -> Outcome {
    let log = String::from_utf8(run.files["train_log.csv"].clone()).map_err(|e| e.to_string())?;
    let wers: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let min = wers.iter().copied().fold(f64::INFINITY, f64::min);
    let heldout = eval::load_nbest(&run.cfg.paths.out_dir.join("heldout.jsonl")).map_err(|e| e.to_string())?;
    let scorers = pipeline::Scorers::load(&run.cfg).map_err(|e| e.to_string())?;
    let scores = scorers.score(&heldout).map_err(|e| e.to_string())?;
    let (_, rep) = eval::tune_weights(&heldout, &scores, ScorerMode::Reranker, &run.cfg.eval.weight_grid)
        .map_err(|e| e.to_string())?;
    ensure(
        (rep.wer() - min).abs() < 5e-7,
        format!("checkpoint held-out WER {:.6} vs log minimum {min:.6}", rep.wer()),
    )?;
    Ok(format!("{} epochs logged, checkpoint held-out WER {:.4} = minimum", wers.len(), rep.wer()))
}

fn reproducibility(run: &EndToEnd) -> Outcome {
    let again = end_to_end(&run.cfg.paths.out_dir)?;
    ensure(again.files.keys().eq(run.files.keys()), "different artifact sets")?;
    for (name, bytes) in &run.files {
        ensure(&again.files[name] == bytes, format!("{name} differs"))?;
    }
    Ok(format!("{} artifacts byte-identical", run.files.len()))
}

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let out = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = t.elapsed().as_secs_f64();
    match out {
        Ok(d) => {
            println!("PASS  {name}: {d} [{secs:.1}s]");
            true
        }
        Err(e) => {
            println!("FAIL  {name}: {e} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report("gradient check", gradient_check);
    ok &= report("normalization", normalization);
    ok &= report("WER and oracle equivalence", oracle_equivalence);
    ok &= report("feature bounds", feature_bounds);
    ok &= report("negative-sampling contract", negative_sampling_contract);
    ok &= report("jackknife leakage", jackknife_leakage);

    let dir = tempfile::tempdir().unwrap();
    match end_to_end(dir.path()) {
        Ok(run) => {
            ok &= report("end-to-end directional", || directional(&run));
            ok &= report("early stopping", || early_stopping(&run));
            ok &= report("byte-identical rerun", || reproducibility(&run));
        }
        Err(e) => {
            for name in ["end-to-end directional", "early stopping", "byte-identical rerun"] {
                println!("FAIL  {name}: pipeline failed: {e}");
            }
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
