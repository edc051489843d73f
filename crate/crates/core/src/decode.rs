//! Joint key/chord/bass decoding.
//!
//! [`viterbi_joint`] maximises
//! `p(k1)p(c1)p(b1)e(c1)e(b1) · Π_t p(k_t|k_{t-1}) p(c_t|c_{t-1},k_t) p(b_t|c_t) p(b_t|b_{t-1}) e(c_t) e(b_t)`
//! exactly. Each step is factored into three maximisations,
//!
//! 1. `A(k̄,c̄,b) = max_b̄ δ(k̄,c̄,b̄) + log p(b|b̄)`
//! 2. `D(k,c̄,b) = max_k̄ A(k̄,c̄,b) + log p(k|k̄)`
//! 3. `δ(k,c,b) = max_c̄ D(k,c̄,b) + log p(c|c̄,k) + log p(b|c) + emissions`
//!
//! which equals the flat product-state recursion because every transition
//! factor depends on at most one previous-state component. Zero-probability
//! entries left by the γ, τ and chord-alphabet constraints are skipped via
//! sparse predecessor lists, so pruning shrinks the work directly.

use rayon::prelude::*;
use thiserror::Error;

use crate::chroma::Chromagram;
use crate::model::{ChordOnlyHmm, HpModel};

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("no admissible path: every state has zero probability at frame {frame}")]
    NoAdmissiblePath { frame: usize },
    #[error("treble has {treble} frames but bass has {bass}")]
    FrameMismatch { treble: usize, bass: usize },
    #[error("nothing to decode: zero frames")]
    Empty,
    #[error("table dimensions are inconsistent: {0}")]
    Shape(String),
}

/// Search-space reductions applied before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Constraints {
    /// Key transitions seen at most γ times in training are disallowed.
    pub gamma: Option<u64>,
    /// Only the τ most frequent basses of each chord are allowed.
    pub tau: Option<usize>,
    /// Restrict chords to the max-gamma output of the chord-only HMM.
    pub cac: bool,
}

impl Constraints {
    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodePath {
    pub keys: Vec<usize>,
    pub chords: Vec<usize>,
    pub basses: Vec<usize>,
    pub log_prob: f64,
}

impl DecodePath {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecodeStats {
    /// Predecessor candidates evaluated over all frames and all three steps.
    pub transitions_expanded: u64,
    /// Size of the admissible chord set (all chords when CAC is off).
    pub admissible_chords: usize,
}

/// Log-domain transition tables over arbitrary small key, chord and bass
/// alphabets.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTables {
    pub n_keys: usize,
    pub n_chords: usize,
    pub n_basses: usize,
    pub log_pi_k: Vec<f64>,
    pub log_pi_c: Vec<f64>,
    pub log_pi_b: Vec<f64>,
    /// `[k̄ * n_keys + k]`.
    pub log_t_k: Vec<f64>,
    /// `[(k * n_chords + c̄) * n_chords + c]`.
    pub log_t_c: Vec<f64>,
    /// `[c * n_basses + b]`.
    pub log_t_bc: Vec<f64>,
    /// `[b̄ * n_basses + b]`.
    pub log_t_bb: Vec<f64>,
}

fn ln_all(v: impl IntoIterator<Item = f64>) -> Vec<f64> {
    v.into_iter().map(f64::ln).collect()
}

impl JointTables {
    fn check(&self) -> Result<(), DecodeError> {
        let (k, c, b) = (self.n_keys, self.n_chords, self.n_basses);
        let sizes = [
            (self.log_pi_k.len(), k, "pi_k"),
            (self.log_pi_c.len(), c, "pi_c"),
            (self.log_pi_b.len(), b, "pi_b"),
            (self.log_t_k.len(), k * k, "t_k"),
            (self.log_t_c.len(), k * c * c, "t_c"),
            (self.log_t_bc.len(), c * b, "t_bc"),
            (self.log_t_bb.len(), b * b, "t_bb"),
        ];
        for (got, want, name) in sizes {
            if got != want {
                return Err(DecodeError::Shape(format!("{name} has {got} entries, expected {want}")));
            }
        }
        if c > 256 || k > 256 || b > 256 {
            return Err(DecodeError::Shape("alphabets are limited to 256 states".into()));
        }
        Ok(())
    }

    /// Tables of `m` with the γ and τ constraints applied and, when
    /// `allowed_chords` is given, chord transitions into or out of a
    /// disallowed chord zeroed.
    pub fn from_model(m: &HpModel, constraints: &Constraints, allowed_chords: Option<&[bool]>) -> Self {
        let nk = m.pi_k.len();
        let nc = m.pi_c.len();
        let nb = m.pi_b.len();
        let t_k = match constraints.gamma {
            Some(g) => prune_key_transitions(m, g),
            None => m.t_k.clone(),
        };
        let t_bc = match constraints.tau {
            Some(t) => prune_chord_to_bass(m, t),
            None => m.t_bc.clone(),
        };
        let mut log_t_c = vec![f64::NEG_INFINITY; nk * nc * nc];
        for k in 0..nk {
            for cp in 0..nc {
                for c in 0..nc {
                    let allowed = allowed_chords.is_none_or(|a| a[cp] && a[c]);
                    if allowed {
                        log_t_c[(k * nc + cp) * nc + c] = m.chord_transition(cp, c, k).ln();
                    }
                }
            }
        }
        Self {
            n_keys: nk,
            n_chords: nc,
            n_basses: nb,
            log_pi_k: ln_all(m.pi_k.iter().copied()),
            log_pi_c: ln_all(m.pi_c.iter().copied()),
            log_pi_b: ln_all(m.pi_b.iter().copied()),
            log_t_k: ln_all(t_k.into_iter().flatten()),
            log_t_c,
            log_t_bc: ln_all(t_bc.into_iter().flatten()),
            log_t_bb: ln_all(m.t_bb.iter().flatten().copied()),
        }
    }

    fn idx(&self, k: usize, c: usize, b: usize) -> usize {
        (k * self.n_chords + c) * self.n_basses + b
    }

    /// Joint log-probability of a fully specified path.
    pub fn path_log_prob(
        &self,
        log_e_c: &[Vec<f64>],
        log_e_b: &[Vec<f64>],
        keys: &[usize],
        chords: &[usize],
        basses: &[usize],
    ) -> f64 {
        let (nk, nc, nb) = (self.n_keys, self.n_chords, self.n_basses);
        let mut lp = self.log_pi_k[keys[0]]
            + self.log_pi_c[chords[0]]
            + self.log_pi_b[basses[0]]
            + log_e_c[0][chords[0]]
            + log_e_b[0][basses[0]];
        for t in 1..keys.len() {
            let (k, c, b) = (keys[t], chords[t], basses[t]);
            lp += self.log_t_k[keys[t - 1] * nk + k]
                + self.log_t_c[(k * nc + chords[t - 1]) * nc + c]
                + self.log_t_bc[c * nb + b]
                + self.log_t_bb[basses[t - 1] * nb + b]
                + log_e_c[t][c]
                + log_e_b[t][b];
        }
        lp
    }
}

/// `p′(k|k̄)`: entries whose raw count is at most γ are zeroed, without
/// renormalisation. Self-transitions follow the same rule.
pub fn prune_key_transitions(m: &HpModel, gamma: u64) -> Vec<Vec<f64>> {
    m.t_k
        .iter()
        .zip(&m.key_counts)
        .map(|(row, counts)| {
            row.iter()
                .zip(counts)
                .map(|(&p, &n)| if n > gamma { p } else { 0.0 })
                .collect()
        })
        .collect()
}

/// `p′(b|c)`: per chord, only the τ basses with the highest raw counts keep
/// their probability; ties at the cutoff favour the lower bass index.
pub fn prune_chord_to_bass(m: &HpModel, tau: usize) -> Vec<Vec<f64>> {
    m.t_bc
        .iter()
        .zip(&m.bass_counts)
        .map(|(row, counts)| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            let mut out = vec![0.0; row.len()];
            for &b in order.iter().take(tau) {
                out[b] = row[b];
            }
            out
        })
        .collect()
}

/// Per-frame, per-state emission log-likelihoods of both chromagrams.
pub fn emission_log_likelihoods(
    m: &HpModel,
    treble: &Chromagram,
    bass: &Chromagram,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let e_c = treble
        .values
        .par_iter()
        .map(|x| m.emis_c.iter().map(|g| g.log_pdf(x)).collect())
        .collect();
    let e_b = bass
        .values
        .par_iter()
        .map(|x| m.emis_b.iter().map(|g| g.log_pdf(x)).collect())
        .collect();
    (e_c, e_b)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Forward-backward state posteriors in the log domain, normalised per
/// frame. `log_trans[i][j]` is `log p(j | i)`.
pub fn posteriors(log_pi: &[f64], log_trans: &[Vec<f64>], log_emis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = log_pi.len();
    let t_len = log_emis.len();
    if t_len == 0 {
        return vec![];
    }
    let mut alpha = vec![vec![0.0; n]; t_len];
    for s in 0..n {
        alpha[0][s] = log_pi[s] + log_emis[0][s];
    }
    let z = log_sum_exp(&alpha[0]);
    alpha[0].iter_mut().for_each(|a| *a -= z);
    let mut terms = vec![0.0; n];
    for t in 1..t_len {
        for j in 0..n {
            for i in 0..n {
                terms[i] = alpha[t - 1][i] + log_trans[i][j];
            }
            alpha[t][j] = log_sum_exp(&terms) + log_emis[t][j];
        }
        let z = log_sum_exp(&alpha[t]);
        alpha[t].iter_mut().for_each(|a| *a -= z);
    }
    let mut beta = vec![vec![0.0; n]; t_len];
    for t in (0..t_len - 1).rev() {
        for i in 0..n {
            for j in 0..n {
                terms[j] = log_trans[i][j] + log_emis[t + 1][j] + beta[t + 1][j];
            }
            beta[t][i] = log_sum_exp(&terms);
        }
        let z = log_sum_exp(&beta[t]);
        beta[t].iter_mut().for_each(|b| *b -= z);
    }
    (0..t_len)
        .map(|t| {
            let lg: Vec<f64> = (0..n).map(|s| alpha[t][s] + beta[t][s]).collect();
            let z = log_sum_exp(&lg);
            lg.iter().map(|x| (x - z).exp()).collect()
        })
        .collect()
}

/// Concatenated 24-d treble+bass observation per frame.
pub fn concat_observations(treble: &Chromagram, bass: &Chromagram) -> Vec<Vec<f64>> {
    treble
        .values
        .iter()
        .zip(&bass.values)
        .map(|(a, b)| a.iter().chain(b.iter()).copied().collect())
        .collect()
}

/// Most probable chord per frame under the chord-only HMM; ties go to the
/// lowest state index.
pub fn max_gamma_decode(hmm: &ChordOnlyHmm, obs: &[Vec<f64>]) -> Vec<usize> {
    let log_pi = ln_all(hmm.pi.iter().copied());
    let log_trans: Vec<Vec<f64>> = hmm.trans.iter().map(|r| ln_all(r.iter().copied())).collect();
    let log_emis: Vec<Vec<f64>> = obs
        .par_iter()
        .map(|x| hmm.emis.iter().map(|g| g.log_pdf(x)).collect())
        .collect();
    posteriors(&log_pi, &log_trans, &log_emis)
        .iter()
        .map(|p| argmax(p))
        .collect()
}

/// Admissible chord mask: chords in the max-gamma output plus no-chord.
pub fn chord_alphabet_constraint(m: &HpModel, obs: &[Vec<f64>]) -> Vec<bool> {
    let mut allowed = vec![false; m.alphabet.n_chords()];
    for c in max_gamma_decode(&m.chord_hmm, obs) {
        allowed[c] = true;
    }
    allowed[m.alphabet.no_chord()] = true;
    allowed
}

/// Decodes one song under the given constraints.
pub fn viterbi_joint(
    m: &HpModel,
    constraints: &Constraints,
    treble: &Chromagram,
    bass: &Chromagram,
) -> Result<(DecodePath, DecodeStats), DecodeError> {
    if treble.n_frames() != bass.n_frames() {
        return Err(DecodeError::FrameMismatch {
            treble: treble.n_frames(),
            bass: bass.n_frames(),
        });
    }
    let allowed = constraints
        .cac
        .then(|| chord_alphabet_constraint(m, &concat_observations(treble, bass)));
    let tables = JointTables::from_model(m, constraints, allowed.as_deref());
    let (e_c, e_b) = emission_log_likelihoods(m, treble, bass);
    let (path, mut stats) = viterbi_tables(&tables, &e_c, &e_b)?;
    stats.admissible_chords = allowed.map_or(m.alphabet.n_chords(), |a| a.iter().filter(|&&x| x).count());
    Ok((path, stats))
}

/// Sparse predecessor structure of a set of tables.
struct Predecessors {
    /// For each key `k`, the keys `k̄` with `p(k|k̄) > 0`.
    keys: Vec<Vec<(u8, f64)>>,
    /// For each `(k, c)`, the chords `c̄` with `p(c|c̄,k) > 0`.
    chords: Vec<Vec<(u8, f64)>>,
    /// For each bass `b`, the basses `b̄` with `p(b|b̄) > 0`.
    basses: Vec<Vec<(u8, f64)>>,
    /// For each chord `c`, the basses with `p(b|c) > 0`.
    chord_basses: Vec<Vec<(u8, f64)>>,
}

impl Predecessors {
    fn new(t: &JointTables) -> Self {
        let (nk, nc, nb) = (t.n_keys, t.n_chords, t.n_basses);
        let finite = |it: &mut dyn Iterator<Item = (usize, f64)>| {
            it.filter(|(_, v)| v.is_finite()).map(|(i, v)| (i as u8, v)).collect()
        };
        Self {
            keys: (0..nk)
                .map(|k| finite(&mut (0..nk).map(|kp| (kp, t.log_t_k[kp * nk + k]))))
                .collect(),
            chords: (0..nk * nc)
                .map(|kc| {
                    let (k, c) = (kc / nc, kc % nc);
                    finite(&mut (0..nc).map(|cp| (cp, t.log_t_c[(k * nc + cp) * nc + c])))
                })
                .collect(),
            basses: (0..nb)
                .map(|b| finite(&mut (0..nb).map(|bp| (bp, t.log_t_bb[bp * nb + b]))))
                .collect(),
            chord_basses: (0..nc)
                .map(|c| finite(&mut (0..nb).map(|b| (b, t.log_t_bc[c * nb + b]))))
                .collect(),
        }
    }
}

/// Factored Viterbi over explicit tables and emission log-likelihoods
/// (`log_e_c[t][c]`, `log_e_b[t][b]`). The final state is the lowest
/// `(k, c, b)` among the maxima and each predecessor is the lowest
/// `(k̄, c̄, b̄)` among the maximising predecessors.
pub fn viterbi_tables(
    t: &JointTables,
    log_e_c: &[Vec<f64>],
    log_e_b: &[Vec<f64>],
) -> Result<(DecodePath, DecodeStats), DecodeError> {
    t.check()?;
    let n_frames = log_e_c.len();
    if n_frames == 0 {
        return Err(DecodeError::Empty);
    }
    if log_e_b.len() != n_frames {
        return Err(DecodeError::FrameMismatch {
            treble: n_frames,
            bass: log_e_b.len(),
        });
    }
    let (nk, nc, nb) = (t.n_keys, t.n_chords, t.n_basses);
    let n_states = nk * nc * nb;
    let preds = Predecessors::new(t);
    let neg = f64::NEG_INFINITY;

    let mut delta = vec![neg; n_states];
    for k in 0..nk {
        for c in 0..nc {
            for b in 0..nb {
                delta[t.idx(k, c, b)] =
                    t.log_pi_k[k] + t.log_pi_c[c] + t.log_pi_b[b] + log_e_c[0][c] + log_e_b[0][b];
            }
        }
    }
    if delta.iter().all(|&d| d == neg) {
        return Err(DecodeError::NoAdmissiblePath { frame: 0 });
    }

    // Backpointers per frame: b̄ for step 1, k̄ for step 2, c̄ for step 3.
    let mut bp_b = vec![0u8; (n_frames - 1) * n_states];
    let mut bp_k = vec![0u8; (n_frames - 1) * n_states];
    let mut bp_c = vec![0u8; (n_frames - 1) * n_states];
    let mut a_buf = vec![neg; n_states];
    let mut d_buf = vec![neg; n_states];
    let mut next = vec![neg; n_states];
    let mut expanded: u64 = 0;

    for step in 1..n_frames {
        let off = (step - 1) * n_states;
        // chords c̄ with at least one live state at the previous frame
        let active: Vec<usize> = (0..nc)
            .filter(|&c| (0..nk).any(|k| (0..nb).any(|b| delta[t.idx(k, c, b)] > neg)))
            .collect();
        let mut live_c = vec![false; nc];
        active.iter().for_each(|&c| live_c[c] = true);

        // Step 1: over b̄, for each (k̄, c̄) block.
        let bp1 = &mut bp_b[off..off + n_states];
        expanded += a_buf
            .par_chunks_mut(nb)
            .zip(bp1.par_chunks_mut(nb))
            .enumerate()
            .map(|(kc, (a_row, bp_row))| {
                a_row.fill(neg);
                if !live_c[kc % nc] {
                    return 0;
                }
                let d_row = &delta[kc * nb..(kc + 1) * nb];
                let mut n = 0u64;
                for b in 0..nb {
                    let mut best = neg;
                    let mut arg = 0u8;
                    for &(bp, lp) in &preds.basses[b] {
                        let v = d_row[bp as usize] + lp;
                        n += 1;
                        if v > best {
                            best = v;
                            arg = bp;
                        }
                    }
                    a_row[b] = best;
                    bp_row[b] = arg;
                }
                n
            })
            .sum::<u64>();

        // Step 2: over k̄, for each (k, c̄, b).
        let bp2 = &mut bp_k[off..off + n_states];
        expanded += d_buf
            .par_chunks_mut(nc * nb)
            .zip(bp2.par_chunks_mut(nc * nb))
            .enumerate()
            .map(|(k, (d_blk, bp_blk))| {
                d_blk.fill(neg);
                let mut n = 0u64;
                for &cp in &active {
                    for b in 0..nb {
                        let mut best = neg;
                        let mut arg = 0u8;
                        for &(kp, lp) in &preds.keys[k] {
                            let v = a_buf[t.idx(kp as usize, cp, b)] + lp;
                            n += 1;
                            if v > best {
                                best = v;
                                arg = kp;
                            }
                        }
                        d_blk[cp * nb + b] = best;
                        bp_blk[cp * nb + b] = arg;
                    }
                }
                n
            })
            .sum::<u64>();

        // Step 3: over c̄, for each (k, c, b) with p(b|c) > 0. Among tied c̄
        // the one whose best k̄ is lowest wins, so the chosen (k̄, c̄, b̄) is the
        // lexicographically lowest maximiser.
        let bp2 = &bp_k[off..off + n_states];
        let bp3 = &mut bp_c[off..off + n_states];
        let (e_c, e_b) = (&log_e_c[step], &log_e_b[step]);
        expanded += next
            .par_chunks_mut(nc * nb)
            .zip(bp3.par_chunks_mut(nc * nb))
            .enumerate()
            .map(|(k, (n_blk, bp_blk))| {
                n_blk.fill(neg);
                let d_blk = &d_buf[k * nc * nb..(k + 1) * nc * nb];
                let mut n = 0u64;
                for c in 0..nc {
                    let cpreds = &preds.chords[k * nc + c];
                    for &(b, lbc) in &preds.chord_basses[c] {
                        let b = b as usize;
                        let mut best = neg;
                        let mut arg = 0u8;
                        for &(cp, lp) in cpreds {
                            let cp = cp as usize;
                            if !live_c[cp] {
                                continue;
                            }
                            let v = d_blk[cp * nb + b] + lp;
                            n += 1;
                            let key_of = |c: usize| bp2[t.idx(k, c, b)];
                            if v > best || (v == best && v > neg && key_of(cp) < key_of(arg as usize)) {
                                best = v;
                                arg = cp as u8;
                            }
                        }
                        n_blk[c * nb + b] = best + lbc + e_c[c] + e_b[b];
                        bp_blk[c * nb + b] = arg;
                    }
                }
                n
            })
            .sum::<u64>();

        std::mem::swap(&mut delta, &mut next);
        if delta.iter().all(|&d| d == neg) {
            return Err(DecodeError::NoAdmissiblePath { frame: step });
        }
    }

    let last = argmax(&delta);
    let log_prob = delta[last];
    let mut keys = vec![0; n_frames];
    let mut chords = vec![0; n_frames];
    let mut basses = vec![0; n_frames];
    let (mut k, mut c, mut b) = (last / (nc * nb), (last / nb) % nc, last % nb);
    for step in (0..n_frames).rev() {
        keys[step] = k;
        chords[step] = c;
        basses[step] = b;
        if step == 0 {
            break;
        }
        let off = (step - 1) * n_states;
        let cp = bp_c[off + t.idx(k, c, b)] as usize;
        let kp = bp_k[off + t.idx(k, cp, b)] as usize;
        let bp = bp_b[off + t.idx(kp, cp, b)] as usize;
        (k, c, b) = (kp, cp, bp);
    }
    Ok((
        DecodePath {
            keys,
            chords,
            basses,
            log_prob,
        },
        DecodeStats {
            transitions_expanded: expanded,
            admissible_chords: nc,
        },
    ))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::annotations::{Alphabet, AlphabetKind, FrameLabels};
    use crate::model::{train, tests::song_with_labels, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_row(rng: &mut ChaCha8Rng, n: usize, zero_prob: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(zero_prob) { 0.0 } else { rng.gen_range(0.05..1.0) })
            .collect();
        if v.iter().all(|&x| x == 0.0) {
            v[rng.gen_range(0..n)] = 1.0;
        }
        let s: f64 = v.iter().sum();
        v.iter().map(|x| (x / s).ln()).collect()
    }

    pub(crate) fn random_tables(rng: &mut ChaCha8Rng, nk: usize, nc: usize, nb: usize, zero_prob: f64) -> JointTables {
        let rows = |rng: &mut ChaCha8Rng, r: usize, n: usize| -> Vec<f64> {
            (0..r).flat_map(|_| log_row(rng, n, zero_prob)).collect()
        };
        JointTables {
            n_keys: nk,
            n_chords: nc,
            n_basses: nb,
            log_pi_k: log_row(rng, nk, 0.0),
            log_pi_c: log_row(rng, nc, 0.0),
            log_pi_b: log_row(rng, nb, 0.0),
            log_t_k: rows(rng, nk, nk),
            log_t_c: rows(rng, nk * nc, nc),
            log_t_bc: rows(rng, nc, nb),
            log_t_bb: rows(rng, nb, nb),
        }
    }

    fn random_emissions(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..n).map(|_| rng.gen_range(-5.0..0.0)).collect()).collect()
    }

    /// Exhaustive search over every state sequence.
    fn brute_force(t: &JointTables, e_c: &[Vec<f64>], e_b: &[Vec<f64>]) -> (f64, Vec<usize>) {
        let ns = t.n_keys * t.n_chords * t.n_basses;
        let n = e_c.len();
        let total = ns.pow(n as u32);
        let mut best = (f64::NEG_INFINITY, vec![]);
        for code in 0..total {
            let mut x = code;
            let mut states = vec![0; n];
            for s in states.iter_mut().rev() {
                *s = x % ns;
                x /= ns;
            }
            let split = |s: usize| (s / (t.n_chords * t.n_basses), (s / t.n_basses) % t.n_chords, s % t.n_basses);
            let ks: Vec<usize> = states.iter().map(|&s| split(s).0).collect();
            let cs: Vec<usize> = states.iter().map(|&s| split(s).1).collect();
            let bs: Vec<usize> = states.iter().map(|&s| split(s).2).collect();
            let lp = t.path_log_prob(e_c, e_b, &ks, &cs, &bs);
            if lp > best.0 {
                best = (lp, states);
            }
        }
        best
    }

    #[test]
    fn factored_viterbi_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..40 {
            let zero_prob = if trial % 2 == 0 { 0.0 } else { 0.3 };
            let tables = random_tables(&mut rng, 2, 3, 2, zero_prob);
            let n = 1 + trial % 4;
            let e_c = random_emissions(&mut rng, n, 3);
            let e_b = random_emissions(&mut rng, n, 2);
            let (lp, states) = brute_force(&tables, &e_c, &e_b);
            let (path, _) = viterbi_tables(&tables, &e_c, &e_b).unwrap();
            assert!((path.log_prob - lp).abs() < 1e-9, "trial {trial}");
            let got: Vec<usize> = (0..n).map(|i| tables.idx(path.keys[i], path.chords[i], path.basses[i])).collect();
            assert_eq!(got, states);
            let recomputed = tables.path_log_prob(&e_c, &e_b, &path.keys, &path.chords, &path.basses);
            assert!((recomputed - path.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn single_frame_is_initial_times_emission() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tables(&mut rng, 3, 4, 3, 0.0);
        let e_c = random_emissions(&mut rng, 1, 4);
        let e_b = random_emissions(&mut rng, 1, 3);
        let (path, stats) = viterbi_tables(&t, &e_c, &e_b).unwrap();
        let best_k = argmax(&t.log_pi_k);
        let cs: Vec<f64> = (0..4).map(|c| t.log_pi_c[c] + e_c[0][c]).collect();
        let bs: Vec<f64> = (0..3).map(|b| t.log_pi_b[b] + e_b[0][b]).collect();
        assert_eq!((path.keys[0], path.chords[0], path.basses[0]), (best_k, argmax(&cs), argmax(&bs)));
        assert_eq!(stats.transitions_expanded, 0);
    }

    #[test]
    fn all_zero_key_row_reports_dead_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = random_tables(&mut rng, 2, 2, 2, 0.0);
        t.log_t_k.fill(f64::NEG_INFINITY);
        let e_c = random_emissions(&mut rng, 3, 2);
        let e_b = random_emissions(&mut rng, 3, 2);
        assert_eq!(
            viterbi_tables(&t, &e_c, &e_b).unwrap_err(),
            DecodeError::NoAdmissiblePath { frame: 1 }
        );
    }

    fn brute_posteriors(log_pi: &[f64], log_trans: &[Vec<f64>], log_emis: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = log_pi.len();
        let t_len = log_emis.len();
        let mut post = vec![vec![0.0; n]; t_len];
        let mut z = 0.0;
        for code in 0..n.pow(t_len as u32) {
            let mut x = code;
            let mut s = vec![0; t_len];
            for v in s.iter_mut().rev() {
                *v = x % n;
                x /= n;
            }
            let mut lp = log_pi[s[0]] + log_emis[0][s[0]];
            for t in 1..t_len {
                lp += log_trans[s[t - 1]][s[t]] + log_emis[t][s[t]];
            }
            let p = lp.exp();
            z += p;
            for t in 0..t_len {
                post[t][s[t]] += p;
            }
        }
        post.iter().map(|r| r.iter().map(|p| p / z).collect()).collect()
    }

    #[test]
    fn posteriors_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let log_pi = log_row(&mut rng, 3, 0.0);
            let log_trans: Vec<Vec<f64>> = (0..3).map(|_| log_row(&mut rng, 3, 0.2)).collect();
            let log_emis = random_emissions(&mut rng, 4, 3);
            let fast = posteriors(&log_pi, &log_trans, &log_emis);
            let slow = brute_posteriors(&log_pi, &log_trans, &log_emis);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn symmetric_posteriors_tie_to_lowest_index() {
        let log_pi = vec![(1.0f64 / 3.0).ln(); 3];
        let log_trans = vec![log_pi.clone(); 3];
        let log_emis = vec![vec![-1.0; 3]; 4];
        for p in posteriors(&log_pi, &log_trans, &log_emis) {
            for x in &p {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
            assert_eq!(argmax(&p), 0);
        }
    }

    fn fixture_model() -> HpModel {
        // Key-transition counts C→C 50, C→G 5, C→F# 1; chord C:maj basses
        // C≫E≫G≫others.
        let alphabet = Alphabet::new(AlphabetKind::MajMin25);
        let mut keys = vec![0usize; 51];
        keys.extend([7, 0, 7, 0, 7, 0, 7, 0, 7, 0, 6]);
        let n = keys.len();
        let chords = vec![0usize; n];
        let mut basses = vec![0usize; n];
        for (i, b) in basses.iter_mut().enumerate() {
            *b = match i % 10 {
                0..=5 => 0,
                6 | 7 => 4,
                8 => 7,
                _ => 0,
            };
        }
        basses[n - 1] = 2;
        let times = (0..n).map(|i| (i as f64, i as f64 + 1.0)).collect();
        let fl = FrameLabels::from_states(times, &keys, &chords, &basses);
        train(&[song_with_labels(fl, 9)], &TrainConfig { alpha: 0.0, alphabet: alphabet.kind, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn key_pruning_fixture() {
        let m = fixture_model();
        assert_eq!(m.key_counts[0][0], 50);
        assert_eq!(m.key_counts[0][7], 5);
        assert_eq!(m.key_counts[0][6], 1);
        let p = prune_key_transitions(&m, 2);
        assert_eq!(p[0][6], 0.0);
        assert_eq!(p[0][0], m.t_k[0][0]);
        assert_eq!(p[0][7], m.t_k[0][7]);
        let p0 = prune_key_transitions(&m, 0);
        for k in [0, 6, 7] {
            assert_eq!(p0[0][k], m.t_k[0][k]);
        }
        let all = prune_key_transitions(&m, 1000);
        assert!(all.iter().flatten().all(|&p| p == 0.0));
    }

    #[test]
    fn bass_pruning_fixture() {
        let m = fixture_model();
        let p3 = prune_chord_to_bass(&m, 3);
        let kept: Vec<usize> = (0..13).filter(|&b| p3[0][b] > 0.0).collect();
        assert_eq!(kept, vec![0, 4, 7]);
        assert_eq!(prune_chord_to_bass(&m, 13), m.t_bc);
        let p1 = prune_chord_to_bass(&m, 1);
        for row in &p1 {
            assert!(row.iter().filter(|&&p| p > 0.0).count() <= 1);
        }
        // rows with no counts keep the lowest indices
        let unseen = &p3[5];
        let kept: Vec<usize> = (0..13).filter(|&b| unseen[b] > 0.0).collect();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn pruning_everything_fails_on_second_frame() {
        let m = fixture_model();
        let ch = song_with_labels(
            FrameLabels::from_states(vec![(0.0, 1.0), (1.0, 2.0)], &[0, 0], &[0, 0], &[0, 0]),
            1,
        );
        let c = Constraints { gamma: Some(1000), ..Constraints::none() };
        assert_eq!(
            viterbi_joint(&m, &c, &ch.treble, &ch.bass).unwrap_err(),
            DecodeError::NoAdmissiblePath { frame: 1 }
        );
    }

    #[test]
    fn constraint_set_sizes() {
        let m = fixture_model();
        let song = song_with_labels(
            FrameLabels::from_states((0..6).map(|i| (i as f64, i as f64 + 1.0)).collect(), &[0; 6], &[0; 6], &[0; 6]),
            2,
        );
        let obs = concat_observations(&song.treble, &song.bass);
        let mask = chord_alphabet_constraint(&m, &obs);
        let decoded: std::collections::BTreeSet<usize> = max_gamma_decode(&m.chord_hmm, &obs).into_iter().collect();
        assert_eq!(mask.iter().filter(|&&x| x).count(), decoded.len() + usize::from(!decoded.contains(&24)));
        assert!(mask[24]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn pruning_is_monotone(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = fixture_model();
            for row in m.key_counts.iter_mut().chain(m.bass_counts.iter_mut()) {
                for c in row.iter_mut() {
                    *c = rng.gen_range(0..20);
                }
            }
            let song = song_with_labels(
                FrameLabels::from_states((0..5).map(|i| (i as f64, i as f64 + 1.0)).collect(), &[0; 5], &[0; 5], &[0; 5]),
                seed,
            );
            let run = |c: Constraints| viterbi_joint(&m, &c, &song.treble, &song.bass).ok();
            let g1 = rng.gen_range(0..10u64);
            let g2 = g1 + rng.gen_range(0..10u64);
            let t2 = rng.gen_range(1..14usize);
            let t1 = rng.gen_range(t2..14usize);
            let loose = run(Constraints { gamma: Some(g1), tau: Some(t1), cac: false });
            let tight = run(Constraints { gamma: Some(g2), tau: Some(t2), cac: false });
            let free = run(Constraints::none()).unwrap();
            if let Some((tp, ts)) = &tight {
                let (lp, ls) = loose.as_ref().unwrap();
                proptest::prop_assert!(tp.log_prob <= lp.log_prob + 1e-12);
                proptest::prop_assert!(ts.transitions_expanded <= ls.transitions_expanded);
                proptest::prop_assert!(lp.log_prob <= free.0.log_prob + 1e-12);
                proptest::prop_assert!(ls.transitions_expanded <= free.1.transitions_expanded);
            }
        }
    }
}
