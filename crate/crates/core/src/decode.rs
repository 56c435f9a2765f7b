//! Steered decoding.
//!
//! Each step restricts the vocabulary to the generator's nucleus, applies the
//! probability-space correction `P_gen + α·(P_gen − P_det)` (or its sign-flipped
//! form) inside that nucleus, clips to `[0, 1]`, renormalizes and samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Direction, SteeringConfig};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::prob::{clip01, normalize, ProbDist};
use crate::vocab::{TokenId, TokenSeq, Vocabulary};

/// Slack when comparing cumulative nucleus mass against `p`, absorbing
/// summation error.
pub const TOP_P_TOLERANCE: f64 = 1e-12;

/// Smallest set of highest-probability tokens whose mass reaches `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopPSubset {
    ids: Vec<TokenId>,
    cumulative_mass: f64,
    member: Vec<bool>,
}

impl TopPSubset {
    /// Ids in descending probability order, ties by ascending id.
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn cumulative_mass(&self) -> f64 {
        self.cumulative_mass
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.member.get(id as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_len(&self) -> usize {
        self.member.len()
    }
}

pub fn top_p_subset(p_gen: &ProbDist, p: f64) -> Result<TopPSubset> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidConfig(format!("top_p must be in (0, 1], got {p}")));
    }
    let mut order: Vec<TokenId> = (0..p_gen.len() as TokenId).filter(|&i| p_gen[i as usize] > 0.0).collect();
    order.sort_by(|&a, &b| p_gen[b as usize].total_cmp(&p_gen[a as usize]).then(a.cmp(&b)));
    let mut member = vec![false; p_gen.len()];
    let mut mass = 0.0;
    let mut ids = Vec::new();
    for id in order {
        ids.push(id);
        member[id as usize] = true;
        mass += p_gen[id as usize];
        if mass >= p - TOP_P_TOLERANCE {
            break;
        }
    }
    Ok(TopPSubset { ids, cumulative_mass: mass, member })
}

/// Zeroes every entry outside `subset`; entries inside are copied unchanged.
pub fn truncate(dist: &[f64], subset: &TopPSubset) -> Vec<f64> {
    dist.iter().enumerate().map(|(i, &v)| if subset.contains(i as TokenId) { v } else { 0.0 }).collect()
}

/// The corrected vector before clipping.
pub fn raw_combination(pg: &[f64], pd: &[f64], alpha: f64, direction: Direction) -> Vec<f64> {
    pg.iter()
        .zip(pd)
        .map(|(&g, &d)| match direction {
            Direction::Suppress => g + alpha * (g - d),
            Direction::Amplify => g + alpha * (d - g),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Combined {
    pub dist: ProbDist,
    /// Clipping removed all mass and the generator's distribution was used
    /// instead.
    pub fell_back: bool,
}

/// Applies the correction to two nucleus-restricted vectors, clips to
/// `[0, 1]` and renormalizes. If clipping leaves no mass, returns
/// `normalize(pg)` and flags the fallback.
pub fn combine(pg: &[f64], pd: &[f64], alpha: f64, direction: Direction) -> Result<Combined> {
    if pg.len() != pd.len() {
        return Err(Error::SubsetMismatch { index: pg.len().min(pd.len()) });
    }
    if let Some(index) = pg.iter().zip(pd).position(|(&g, &d)| d > 0.0 && g <= 0.0) {
        return Err(Error::SubsetMismatch { index });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let clipped = clip01(&raw_combination(pg, pd, alpha, direction));
    match normalize(&clipped) {
        Ok(dist) => Ok(Combined { dist, fell_back: false }),
        Err(Error::ZeroMass(_)) => Ok(Combined { dist: normalize(pg)?, fell_back: true }),
        Err(e) => Err(e),
    }
}

/// Inverse-CDF sampling over ascending token ids. Draws exactly one `f64`
/// from `rng`.
pub fn sample_token<R: Rng + ?Sized>(dist: &ProbDist, rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let target = u * dist.iter().sum::<f64>();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = i;
        cum += p;
        if cum > target {
            return i as TokenId;
        }
    }
    last_positive as TokenId
}

/// One decoding step's outcome.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub subset: TopPSubset,
    pub dist: ProbDist,
    pub fell_back: bool,
}

/// The final sampling distribution for one step given the generator's and
/// (optionally) the detoxifier's full next-token distributions.
pub fn steer_step(p_gen: &ProbDist, p_det: Option<&ProbDist>, config: &SteeringConfig) -> Result<StepOutput> {
    let subset = top_p_subset(p_gen, config.top_p())?;
    let pg = truncate(p_gen, &subset);
    let (dist, fell_back) = match p_det {
        Some(p_det) => {
            let pd = truncate(p_det, &subset);
            let c = combine(&pg, &pd, config.alpha(), config.direction())?;
            (c.dist, c.fell_back)
        }
        None => (normalize(&pg)?, false),
    };
    Ok(StepOutput { subset, dist, fell_back })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub prompt: TokenSeq,
    /// Generated tokens, including a terminating EOS if one was sampled.
    pub continuation: TokenSeq,
    /// Steered probability of each chosen token.
    pub step_probs: Vec<f64>,
    pub finish_reason: FinishReason,
    /// Steps where clipping annihilated the nucleus and the generator's
    /// distribution was used unchanged.
    pub fallback_steps: usize,
    /// Seed of the sampling stream.
    pub seed: u64,
}

impl GenerationRecord {
    /// Continuation with any trailing EOS removed.
    pub fn text_tokens(&self, eos: TokenId) -> &[TokenId] {
        match self.continuation.last() {
            Some(&t) if t == eos => &self.continuation[..self.continuation.len() - 1],
            _ => &self.continuation,
        }
    }
}

/// Seed for sample `index` of the prompt identified by `prompt_key`, so
/// that each prompt's samples do not depend on batch order.
///
/// The first eight bytes (little-endian) of
/// `SHA-256(seed_le ‖ len(prompt_key)_le ‖ prompt_key ‖ index_le)`.
pub fn derive_stream_seed(seed: u64, prompt_key: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((prompt_key.len() as u64).to_le_bytes());
    h.update(prompt_key.as_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn check_vocab(generator: &Vocabulary, detoxifier: &Vocabulary) -> Result<()> {
    if generator == detoxifier {
        Ok(())
    } else {
        Err(Error::VocabMismatch(format!(
            "generator has {} tokens, detoxifier has {} (or different entries)",
            generator.len(),
            detoxifier.len()
        )))
    }
}

/// Samples one continuation of `prompt` using a ChaCha8 stream seeded with
/// `stream_seed`.
pub fn generate(
    generator: &dyn LanguageModel,
    detoxifier: Option<&dyn LanguageModel>,
    prompt: &TokenSeq,
    config: &SteeringConfig,
    stream_seed: u64,
) -> Result<GenerationRecord> {
    let vocab = generator.vocab();
    if let Some(det) = detoxifier {
        check_vocab(vocab, det.vocab())?;
    }
    vocab.check(prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let mut context = prompt.0.clone();
    let mut continuation = Vec::with_capacity(config.max_new_tokens());
    let mut step_probs = Vec::with_capacity(config.max_new_tokens());
    let mut fallback_steps = 0;
    let mut finish_reason = FinishReason::MaxTokens;
    for _ in 0..config.max_new_tokens() {
        let p_gen = generator.next_dist(&context);
        let p_det = detoxifier.map(|d| d.next_dist(&context));
        let step = steer_step(&p_gen, p_det.as_ref(), config)?;
        fallback_steps += usize::from(step.fell_back);
        let tok = sample_token(&step.dist, &mut rng);
        debug_assert!(step.subset.contains(tok));
        step_probs.push(step.dist[tok as usize]);
        continuation.push(tok);
        context.push(tok);
        if tok == vocab.eos() {
            finish_reason = FinishReason::Eos;
            break;
        }
    }
    Ok(GenerationRecord {
        prompt: prompt.clone(),
        continuation: TokenSeq(continuation),
        step_probs,
        finish_reason,
        fallback_steps,
        seed: stream_seed,
    })
}

/// `config.k_samples()` independent continuations; sample `i` uses
/// [`derive_stream_seed`]`(config.seed(), prompt_key, i)`.
pub fn generate_k(
    generator: &dyn LanguageModel,
    detoxifier: Option<&dyn LanguageModel>,
    prompt_key: &str,
    prompt: &TokenSeq,
    config: &SteeringConfig,
) -> Result<Vec<GenerationRecord>> {
    (0..config.k_samples())
        .map(|i| generate(generator, detoxifier, prompt, config, derive_stream_seed(config.seed(), prompt_key, i)))
        .collect()
}

/// One line of a generation record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub prompt_id: String,
    pub sample_index: usize,
    pub prompt_text: String,
    pub continuation_text: String,
    pub finish_reason: FinishReason,
    pub fallback_steps: usize,
    pub seed: u64,
}

impl RecordLine {
    pub fn new(prompt_id: &str, sample_index: usize, record: &GenerationRecord, vocab: &Vocabulary) -> Self {
        RecordLine {
            prompt_id: prompt_id.to_owned(),
            sample_index,
            prompt_text: vocab.decode(&record.prompt),
            continuation_text: vocab.decode(record.text_tokens(vocab.eos())),
            finish_reason: record.finish_reason,
            fallback_steps: record.fallback_steps,
            seed: record.seed,
        }
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("record line serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{NGramModel, UniformModel};
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn nucleus_examples() {
        let s = top_p_subset(&dist(&[0.5, 0.3, 0.15, 0.05]), 0.9).unwrap();
        assert_eq!(s.ids(), &[0, 1, 2]);
        assert!((s.cumulative_mass() - 0.95).abs() < 1e-15);

        let s = top_p_subset(&dist(&[0.1, 0.0, 0.6, 0.3]), 1.0).unwrap();
        assert_eq!(s.ids(), &[2, 3, 0]);
        assert!(!s.contains(1));

        let s = top_p_subset(&dist(&[0.25; 4]), 0.5).unwrap();
        assert_eq!(s.ids(), &[0, 1]);

        assert!(top_p_subset(&dist(&[0.5, 0.5]), 0.0).is_err());
    }

    #[test]
    fn truncate_examples() {
        let d = [0.5, 0.3, 0.15, 0.05];
        let s = top_p_subset(&dist(&d), 0.9).unwrap();
        assert_eq!(truncate(&d, &s), vec![0.5, 0.3, 0.15, 0.0]);
        let all = top_p_subset(&dist(&d), 1.0).unwrap();
        assert_eq!(truncate(&d, &all), d.to_vec());
        // detoxifier mass outside the generator's nucleus is dropped, not moved
        let pd = [0.1, 0.1, 0.1, 0.7];
        assert_eq!(truncate(&pd, &s), vec![0.1, 0.1, 0.1, 0.0]);
    }

    #[test]
    fn combine_examples() {
        let pg = [0.5, 0.3, 0.2];
        let c = combine(&pg, &[0.8, 0.1, 0.1], 1.0, Direction::Suppress).unwrap();
        assert!(close(&c.dist, &[0.2, 0.5, 0.3], 1e-12), "{:?}", c.dist);
        assert!(!c.fell_back);

        let c = combine(&pg, &[0.9, 0.05, 0.05], 2.0, Direction::Suppress).unwrap();
        assert!(close(&c.dist, &[0.0, 0.8 / 1.3, 0.5 / 1.3], 1e-12));
        assert!(close(&c.dist, &[0.0, 0.61538, 0.38461], 1e-5));

        for dir in [Direction::Suppress, Direction::Amplify] {
            let c = combine(&pg, &[0.8, 0.1, 0.1], 0.0, dir).unwrap();
            assert!(close(&c.dist, &normalize(&pg).unwrap(), 1e-12));
            let c = combine(&pg, &pg, 7.5, dir).unwrap();
            assert!(close(&c.dist, &normalize(&pg).unwrap(), 1e-12));
        }

        let pd = [0.2, 0.2, 0.6];
        let c = combine(&pg, &pd, 1.0, Direction::Amplify).unwrap();
        assert!(close(&c.dist, &pd, 1e-12));
    }

    #[test]
    fn combine_falls_back_when_clipping_removes_everything() {
        let pg = [0.5, 0.5, 0.0];
        let pd = [0.5, 0.5, 0.0];
        // Unnormalized detoxifier mass larger than the generator's everywhere.
        let pd_heavy = [0.9, 0.9, 0.0];
        let c = combine(&pg, &pd_heavy, 5.0, Direction::Suppress).unwrap();
        assert!(c.fell_back);
        assert!(close(&c.dist, &[0.5, 0.5, 0.0], 1e-15));
        assert!(!combine(&pg, &pd, 5.0, Direction::Suppress).unwrap().fell_back);
    }

    #[test]
    fn combine_rejects_mismatched_support() {
        assert!(matches!(
            combine(&[0.5, 0.5, 0.0], &[0.4, 0.4, 0.2], 1.0, Direction::Suppress),
            Err(Error::SubsetMismatch { index: 2 })
        ));
        assert!(matches!(combine(&[1.0], &[0.5, 0.5], 1.0, Direction::Suppress), Err(Error::SubsetMismatch { .. })));
    }

    #[test]
    fn sampling_point_mass_and_determinism() {
        let d = dist(&[0.0, 0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_token(&d, &mut rng), 3);
        }
        let d = dist(&[0.1, 0.2, 0.3, 0.4]);
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(42);
            (0..20).map(|_| sample_token(&d, &mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(42);
            (0..20).map(|_| sample_token(&d, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_frequency() {
        let d = dist(&[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zeros = (0..100_000).filter(|_| sample_token(&d, &mut rng) == 0).count();
        let freq = zeros as f64 / 100_000.0;
        assert!((0.49..=0.51).contains(&freq), "{freq}");
    }

    fn toy_models() -> (NGramModel, NGramModel) {
        let v = Vocabulary::new(["a", "b", "c", "x"]).unwrap();
        let s = |t: &str| -> TokenSeq {
            t.split_whitespace().map(|w| v.id(w).unwrap()).collect::<TokenSeq>().with_eos(v.eos())
        };
        let gen = NGramModel::train(&[s("a b c a b c"), s("a x b x c"), s("b c a b")], 2, 0.5, v.clone()).unwrap();
        let det = NGramModel::train(&[s("a x x b x"), s("x x c x")], 2, 0.5, v).unwrap();
        (gen, det)
    }

    #[test]
    fn self_detoxification_matches_plain_sampling() {
        let (gen, _) = toy_models();
        let prompt = TokenSeq(vec![3]);
        let cfg = SteeringConfig::with_seed(5).set_max_new_tokens(30).unwrap();
        let plain = generate(&gen, None, &prompt, &cfg, 99).unwrap();
        let selfdet = generate(&gen, Some(&gen), &prompt, &cfg, 99).unwrap();
        assert_eq!(plain, selfdet);
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let (gen, _) = toy_models();
        let other = UniformModel::new(Vocabulary::new(["p", "q"]).unwrap());
        let cfg = SteeringConfig::with_seed(0);
        let err = generate(&gen, Some(&other), &TokenSeq(vec![3]), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::VocabMismatch(_)));
    }

    #[test]
    fn generate_k_streams() {
        let (gen, det) = toy_models();
        let cfg = SteeringConfig::with_seed(11).set_k_samples(4).unwrap();
        let prompt = TokenSeq(vec![3, 4]);
        let a = generate_k(&gen, Some(&det), "p7", &prompt, &cfg).unwrap();
        let b = generate_k(&gen, Some(&det), "p7", &prompt, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let single = cfg.clone().set_k_samples(1).unwrap();
        let one = generate_k(&gen, Some(&det), "p7", &prompt, &single).unwrap();
        assert_eq!(one[0], generate(&gen, Some(&det), &prompt, &cfg, derive_stream_seed(11, "p7", 0)).unwrap());
        let seeds: std::collections::HashSet<u64> = a.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn record_line_format() {
        let (gen, det) = toy_models();
        let cfg = SteeringConfig::with_seed(3);
        let rec = generate(&gen, Some(&det), &TokenSeq(vec![3]), &cfg, 1).unwrap();
        let line = RecordLine::new("p0", 0, &rec, gen.vocab()).to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in
            ["prompt_id", "sample_index", "prompt_text", "continuation_text", "finish_reason", "fallback_steps", "seed"]
        {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["prompt_text"], "a");
        assert!(line.ends_with('\n') && line.matches('\n').count() == 1);
    }

    fn dist_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..16)
            .prop_flat_map(|n| (prop::collection::vec(0.001f64..1.0, n), prop::collection::vec(0.001f64..1.0, n)))
    }

    proptest! {
        #[test]
        fn direction_duality_before_clip((g, d) in dist_strategy(), alpha in 0.0f64..9.0) {
            let s = raw_combination(&g, &d, alpha, Direction::Suppress);
            let a = raw_combination(&g, &d, alpha, Direction::Amplify);
            for i in 0..g.len() {
                prop_assert!((s[i] + a[i] - 2.0 * g[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn combined_support_inside_nucleus((g, d) in dist_strategy(), alpha in 0.0f64..9.0, p in 0.05f64..1.0) {
            let pg = normalize(&g).unwrap();
            let pd = normalize(&d).unwrap();
            let cfg = SteeringConfig::new(alpha, p, Direction::Suppress, 1, 1, 0).unwrap();
            let step = steer_step(&pg, Some(&pd), &cfg).unwrap();
            for (i, &q) in step.dist.iter().enumerate() {
                if !step.subset.contains(i as TokenId) {
                    prop_assert_eq!(q, 0.0);
                }
            }
            prop_assert!((step.dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn nucleus_is_minimal((g, _) in dist_strategy(), p in 0.01f64..1.0) {
            let pg = normalize(&g).unwrap();
            let s = top_p_subset(&pg, p).unwrap();
            prop_assert!(s.cumulative_mass() >= p - TOP_P_TOLERANCE);
            let without_last = s.cumulative_mass() - pg[*s.ids().last().unwrap() as usize];
            prop_assert!(without_last < p - TOP_P_TOLERANCE || s.len() == pg.iter().filter(|&&x| x > 0.0).count());
        }

        #[test]
        fn suppression_shrinks_share_of_detoxifier_favoured_token(
            (g, d) in dist_strategy(), a1 in 0.0f64..4.0, bump in 0.01f64..4.0
        ) {
            let pg = normalize(&g).unwrap();
            let pd = normalize(&d).unwrap();
            // j: detoxifier favours it more than the generator; m: less.
            let j = (0..pg.len()).find(|&i| pd[i] > pg[i]);
            let m = (0..pg.len()).find(|&i| pd[i] < pg[i]);
            let (Some(j), Some(m)) = (j, m) else { return Ok(()); };
            let a2 = a1 + bump;
            let r1 = clip01(&raw_combination(&pg, &pd, a1, Direction::Suppress));
            let r2 = clip01(&raw_combination(&pg, &pd, a2, Direction::Suppress));
            // Share ratios of j to m; the normalizer cancels.
            if r2[j] > 0.0 {
                prop_assert!(r2[j] / r2[m] < r1[j] / r1[m]);
            } else {
                prop_assert!(r1[j] >= 0.0);
            }
        }
    }
}
