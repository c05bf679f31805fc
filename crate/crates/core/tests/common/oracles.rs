use emvi::corpus::{generate_corpus, AddresseeGraph, GeneratorConfig};
use emvi::em::{e_step, Posterior, PosteriorTable, Stage};
use emvi::encoder::{khop_positions, Encoder, EncoderConfig};
use emvi::oracle::{ancestors_by_walk, enumerate_graph_prior, exact_posterior, gumbel_frequency_test, MAX_ENUMERATION_TURNS};
use emvi::tensor::{DType, Mat, Tape};
use emvi::vi::{anneal_tau, assemble_prior, relaxed_sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Compares batched E-step posteriors with the per-candidate oracle on `n`
/// random (dialogue, turn) instances. Returns how many matched bit for bit.
pub fn estep_vs_exact(n: usize, seed: u64) -> Result<usize, String> {
    let gen = GeneratorConfig {
        n_dialogues: 40,
        seed,
        ..GeneratorConfig::default()
    };
    let corpus = generate_corpus(&gen).map_err(|e| e.to_string())?;
    let convs = corpus.conversations();
    let mut ecfg = EncoderConfig::new(corpus.vocab.size());
    ecfg.d_model = 32;
    ecfg.ffn_dim = 64;
    ecfg.dtype = DType::F64;
    let enc: Encoder<f64> = Encoder::init(&ecfg, seed ^ 0x5eed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let d = rng.gen_range(0..convs.len());
            (d, rng.gen_range(2..=convs[d].len()))
        })
        .collect();
    let mut dialogues: Vec<usize> = picks.iter().map(|p| p.0).collect();
    dialogues.sort_unstable();
    dialogues.dedup();
    let table = e_step(&enc, &corpus.vocab, &convs, &dialogues, Stage::One);
    let mut matched = 0;
    for &(d, t) in &picks {
        let got = &table.get(d, t).ok_or("missing posterior")?.probs;
        let want = exact_posterior(&enc, &corpus.vocab, &convs[d], t);
        let same = got.len() == want.len() && got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("dialogue {d} turn {t}: {got:?} vs {want:?}"));
        }
        matched += 1;
    }
    Ok(matched)
}

/// Random stage-one posteriors for turns `2..t` of dialogue 0.
fn random_table(t: usize, rng: &mut ChaCha8Rng) -> PosteriorTable {
    let mut table = PosteriorTable::default();
    for turn in 2..t {
        let scores: Vec<f64> = (0..turn - 1).map(|_| rng.gen_range(0.01..1.0)).collect();
        table.insert(0, turn, Posterior::from_scores(scores));
    }
    table
}

/// Largest gap between the joint implied by the assembled prior matrix and
/// brute-force enumeration over the table's rows, over `n` random tables
/// with `t ≤ 5`.
pub fn prior_vs_enumeration(n: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let t = rng.gen_range(2..=MAX_ENUMERATION_TURNS);
        let table = random_table(t, &mut rng);
        let m: Mat<f64> = assemble_prior(&table, 0, t).map_err(|e| e.to_string())?;
        let mut rows: Vec<Vec<f64>> = (2..t).map(|turn| table.get(0, turn).unwrap().probs.clone()).collect();
        rows.push(vec![1.0 / (t - 1) as f64; t - 1]);
        let joint = enumerate_graph_prior(&rows, t).map_err(|e| e.to_string())?;
        worst = worst.max((joint.total() - 1.0).abs());
        for (g, p) in &joint.graphs {
            let mut implied = 1.0;
            for turn in 2..=t {
                implied *= m.get(turn - 1, g.parent(turn).unwrap() - 1);
            }
            worst = worst.max((implied - p).abs());
        }
        if m.row(0).iter().any(|&v| v != 0.0) {
            return Err("root row of the prior must be zero".into());
        }
    }
    Ok(worst)
}

pub fn random_graph(t: usize, rng: &mut ChaCha8Rng) -> AddresseeGraph {
    let mut parents = vec![None];
    for i in 2..=t {
        parents.push(Some(rng.gen_range(1..i)));
    }
    AddresseeGraph::from_parents(parents).unwrap()
}

/// Number of random graphs on which every k-hop row equals the walked
/// ancestor one-hot (or zero past the root) exactly.
pub fn khop_vs_walk(n: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Mat<f64>> = Vec::new();
    for case in 0..n {
        let t = rng.gen_range(1..=10);
        let k = rng.gen_range(1..=4);
        let g = random_graph(t, &mut rng);
        let mut tape = Tape::new(&params);
        let z = tape.constant(g.matrix::<f64>());
        let hops = khop_positions(&mut tape, z, k);
        let walk = ancestors_by_walk(&g, t, k);
        for (i, (&v, anc)) in hops.iter().zip(&walk).enumerate() {
            let row = tape.value(v);
            let mut want = vec![0.0; t];
            if let Some(a) = anc {
                want[a - 1] = 1.0;
            }
            if row.data != want {
                return Err(format!("case {case}: hop {i} of {:?} gave {:?}", g.parents(), row.data));
            }
        }
    }
    Ok(n)
}

pub struct SamplingReport {
    pub worst_frequency_gap: f64,
    pub masked_exact_zero: bool,
    pub tau_first: f64,
    /// Every temperature is at least 0.1 and exactly 0.1 from trunk 11 on.
    pub tau_floor_ok: bool,
}

/// Argmax frequencies of relaxed samples against softmax of the logits,
/// masked entries, and the temperature schedule end points.
pub fn sampling(n: usize, seed: u64) -> SamplingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: [(&[f64], f64); 3] = [
        (&[0.0, 3f64.ln()], 1.0),
        (&[0.5, -1.0, 0.0, 1.2], 0.3),
        (&[1.0, f64::NEG_INFINITY, 0.0], 5.0),
    ];
    let mut gap = 0.0f64;
    for (logits, tau) in cases {
        let freq = gumbel_frequency_test(logits, tau, n, &mut rng);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (f, l) in freq.iter().zip(logits) {
            gap = gap.max((f - (l - m).exp() / z).abs());
        }
    }
    let mut s = Mat::from_vec(3, 3, vec![f64::NEG_INFINITY; 9]);
    s.set(1, 0, 0.3);
    s.set(2, 0, -0.2);
    s.set(2, 1, 4.0);
    let mut g = Mat::zeros(3, 3);
    for v in &mut g.data {
        *v = emvi::vi::sample_gumbel(&mut rng);
    }
    let mut masked = true;
    for tau in [0.1, 1.0, 10.0] {
        let out = relaxed_sample(&s, &g, tau);
        for r in 0..3 {
            for c in 0..3 {
                if c >= r && out.get(r, c).to_bits() != 0.0f64.to_bits() {
                    masked = false;
                }
            }
        }
    }
    SamplingReport {
        worst_frequency_gap: gap,
        masked_exact_zero: masked,
        tau_first: anneal_tau(1),
        tau_floor_ok: (1..500).all(|n| anneal_tau(n) >= 0.1 && (n < 11 || anneal_tau(n) == 0.1)),
    }
}
