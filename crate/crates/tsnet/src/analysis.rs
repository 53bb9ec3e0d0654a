//! Style diagnostics: substitution statistics between per-TSI outputs,
//! PCA of the AdaIN scale/offset space, classical metric MDS of output
//! edit distances, and the embedding-distance vs output-distance
//! correlation.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::ctc::greedy_decode;
use crate::error::{Error, Result};
use crate::net::{forward_line, LineStyle, Model};
use crate::synth::{Alphabet, Sample};
use crate::tensor::Tape;
use crate::train::{align_weighted, edit_distance, AlignOp};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching unit
/// eigenvectors (one per row of the result).
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    if a.iter().any(|row| row.len() != n) {
        return Err(Error::Analysis("matrix is not square".into()));
    }
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    for i in 0..n {
        for j in 0..n {
            if (a[i][j] - a[j][i]).abs() > 1e-9 * scale {
                return Err(Error::Analysis("matrix is not symmetric".into()));
            }
        }
    }

    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i][j] * m[i][j];
            }
        }
        if off.sqrt() <= 1e-14 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[i][i]).collect();
    let vectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| v.iter().map(|row| row[i]).collect())
        .collect();
    Ok((values, vectors))
}

/// Flips a vector so its largest-magnitude coordinate is positive; ties
/// resolve to the earliest index, keeping the convention deterministic.
fn fix_sign(vec: &mut [f64], scores: Option<&mut [f64]>) {
    let mut best = 0;
    for (i, x) in vec.iter().enumerate() {
        if x.abs() > vec[best].abs() + 1e-15 {
            best = i;
        }
    }
    if vec[best] < 0.0 {
        for x in vec.iter_mut() {
            *x = -*x;
        }
        if let Some(s) = scores {
            for x in s.iter_mut() {
                *x = -*x;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Per-sample coordinates along each component.
    pub scores: Vec<Vec<f64>>,
    /// Variance along each component.
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Exact PCA via the sample Gram matrix (the sample count is tiny here).
/// Keeps every component whose variance is numerically positive.
pub fn pca(rows: &[Vec<f64>]) -> Result<Pca> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Analysis("pca needs at least 2 rows".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) || d == 0 {
        return Err(Error::Analysis("pca rows must share a non-zero width".into()));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    let (lam, u) = symmetric_eigen(&gram)?;
    let lmax = lam.first().copied().unwrap_or(0.0).max(0.0);

    let mut components = Vec::new();
    let mut scores = vec![Vec::new(); n];
    let mut eigenvalues = Vec::new();
    for (l, uvec) in lam.iter().zip(&u) {
        if *l <= 1e-12 * lmax.max(1e-300) || *l <= 0.0 {
            break;
        }
        let norm = l.sqrt();
        let mut comp = vec![0.0; d];
        for (ui, row) in uvec.iter().zip(&centered) {
            for (c, x) in comp.iter_mut().zip(row) {
                *c += ui * x / norm;
            }
        }
        let mut sc: Vec<f64> = uvec.iter().map(|ui| ui * norm).collect();
        fix_sign(&mut comp, Some(&mut sc));
        for (row, s) in scores.iter_mut().zip(&sc) {
            row.push(*s);
        }
        // Variance convention: eigenvalue of the covariance over n samples.
        eigenvalues.push(l / n as f64);
        components.push(comp);
    }
    Ok(Pca {
        components,
        scores,
        eigenvalues,
        mean,
    })
}

impl Pca {
    /// Rebuilds one sample from its scores over all kept components.
    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (s, comp) in scores.iter().zip(&self.components) {
            for (o, c) in out.iter_mut().zip(comp) {
                *o += s * c;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StylePcaResult {
    /// Registered TSIs in ascending order.
    pub tsi: Vec<u32>,
    /// 2-D projection of each TSI's concatenated AdaIN scale and offset.
    pub points: Vec<[f64; 2]>,
    /// Fraction of total variance captured by each of the two axes.
    pub explained: [f64; 2],
    /// True when the point cloud has rank below 2.
    pub degenerate: bool,
    pub pca: Pca,
}

/// Projects each registered TSI's AdaIN parameters (the concatenated
/// scale and offset vectors the style affine produces from its embedding)
/// to 2-D.
pub fn gamma_beta_pca(table: &crate::tsb::StyleTable<f32>) -> Result<StylePcaResult> {
    let registered = table.registered();
    if registered.len() < 3 {
        return Err(Error::Analysis(format!(
            "pca needs at least 3 registered TSI, have {}",
            registered.len()
        )));
    }
    let mut tsi = Vec::new();
    let mut rows = Vec::new();
    for (t, row) in registered {
        let e = table.embedding_row(row)?;
        let ef: Vec<f64> = e.data().iter().map(|&v| f64::from(v)).collect();
        let (gamma, beta) = crate::tsb::style_affine_f64(table, &ef);
        let mut gb = gamma;
        gb.extend(beta);
        tsi.push(t);
        rows.push(gb);
    }
    let p = pca(&rows)?;
    let total: f64 = p.eigenvalues.iter().sum();
    let axis = |i: usize| -> (Vec<f64>, f64) {
        if i < p.components.len() {
            (
                p.scores.iter().map(|s| s[i]).collect(),
                if total > 0.0 { p.eigenvalues[i] / total } else { 0.0 },
            )
        } else {
            (vec![0.0; rows.len()], 0.0)
        }
    };
    let (xs, ex) = axis(0);
    let (ys, ey) = axis(1);
    let degenerate = p.components.len() < 2;
    Ok(StylePcaResult {
        tsi,
        points: xs.iter().zip(&ys).map(|(&x, &y)| [x, y]).collect(),
        explained: [ex, ey],
        degenerate,
        pca: p,
    })
}

#[derive(Debug, Clone)]
pub struct MdsResult {
    pub points: Vec<[f64; 2]>,
    /// Eigenvalues of the double-centered matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// True when fewer than 2 positive eigenvalues exist.
    pub degenerate: bool,
}

/// Classical metric MDS: embeds a pairwise distance matrix in 2-D via
/// double centering and the top eigenpairs.
pub fn mds_projection(dist: &[Vec<f64>]) -> Result<MdsResult> {
    let n = dist.len();
    if n == 0 || dist.iter().any(|r| r.len() != n) {
        return Err(Error::Analysis("distance matrix must be square".into()));
    }
    for i in 0..n {
        if dist[i][i] != 0.0 {
            return Err(Error::Analysis("distance matrix diagonal must be zero".into()));
        }
        for j in 0..n {
            if dist[i][j] < 0.0 {
                return Err(Error::Analysis("distances must be non-negative".into()));
            }
            if (dist[i][j] - dist[j][i]).abs() > 1e-9 * dist[i][j].abs().max(1.0) {
                return Err(Error::Analysis("distance matrix must be symmetric".into()));
            }
        }
    }

    let sq: Vec<Vec<f64>> = dist
        .iter()
        .map(|r| r.iter().map(|x| x * x).collect())
        .collect();
    let row_mean: Vec<f64> = sq.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            b[i][j] = -0.5 * (sq[i][j] - row_mean[i] - row_mean[j] + grand);
        }
    }
    let (lam, vec) = symmetric_eigen(&b)?;
    let lmax = lam.first().copied().unwrap_or(0.0).max(0.0);
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for (l, v) in lam.iter().zip(&vec).take(2) {
        if *l > 1e-12 * lmax.max(1e-300) && *l > 0.0 {
            let mut coord: Vec<f64> = v.iter().map(|x| x * l.sqrt()).collect();
            fix_sign(&mut coord, None);
            axes.push(coord);
        }
    }
    let degenerate = axes.len() < 2;
    while axes.len() < 2 {
        axes.push(vec![0.0; n]);
    }
    Ok(MdsResult {
        points: (0..n).map(|i| [axes[0][i], axes[1][i]]).collect(),
        eigenvalues: lam,
        degenerate,
    })
}

/// Decodes every line under every given TSI. Result is indexed
/// `[tsi_index][line]` and holds the output text as characters.
pub fn decode_all(
    model: &Model<f32>,
    alphabet: &Alphabet,
    lines: &[Sample],
    tsis: &[u32],
) -> Result<Vec<Vec<Vec<char>>>> {
    let table = model.style_table()?;
    let rows: Vec<usize> = tsis
        .iter()
        .map(|&t| table.require_row(t))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..tsis.len())
        .flat_map(|t| (0..lines.len()).map(move |l| (t, l)))
        .collect();
    let decoded: Vec<Vec<char>> = jobs
        .par_iter()
        .map(|&(t, l)| {
            let mut tape = Tape::inference();
            let vars = model.vars(&mut tape, false);
            let logits = forward_line(
                &mut tape,
                &model.config,
                &vars,
                &lines[l].image,
                LineStyle::Row(rows[t]),
            )?;
            let classes = greedy_decode(tape.value(logits))?;
            Ok(alphabet.text_of_classes(&classes)?.chars().collect())
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<Vec<char>>> = vec![Vec::with_capacity(lines.len()); tsis.len()];
    for ((t, _), chars) in jobs.into_iter().zip(decoded) {
        out[t].push(chars);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionEntry {
    /// Replacement character, or None when the occurrence was dropped.
    pub target: Option<char>,
    /// Percent of this character's substitution events.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharSubstitutions {
    pub ch: char,
    /// Percent of the character's occurrences that were substituted or
    /// dropped (Table-6-style R).
    pub ratio: f64,
    /// Substitution targets, most frequent first.
    pub entries: Vec<SubstitutionEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct SubstitutionTable {
    /// Per-character statistics, highest substitution ratio first.
    pub rows: Vec<CharSubstitutions>,
}

/// Aggregates substitution statistics from decoded outputs (indexed
/// `[tsi][line]`): for every unordered TSI pair and line the two outputs
/// are aligned, and each substitution is counted in both directions, so
/// the table is symmetric in pair order. Deletions count toward the
/// ratio with a None target. Alignment uses the gap-weighted script so
/// that outputs differing at nearly every position stay paired up instead
/// of splintering into indels around chance shifted runs.
pub fn accumulate_substitutions(outputs: &[Vec<Vec<char>>]) -> SubstitutionTable {
    let mut occ: BTreeMap<char, u64> = BTreeMap::new();
    let mut subs: BTreeMap<char, BTreeMap<Option<char>, u64>> = BTreeMap::new();
    for i in 0..outputs.len() {
        for j in (i + 1)..outputs.len() {
            for (a, b) in outputs[i].iter().zip(&outputs[j]) {
                for op in align_weighted(a, b) {
                    match op {
                        AlignOp::Match(p, _) => {
                            *occ.entry(a[p]).or_default() += 2;
                        }
                        AlignOp::Substitute(p, q) => {
                            *occ.entry(a[p]).or_default() += 1;
                            *occ.entry(b[q]).or_default() += 1;
                            *subs.entry(a[p]).or_default().entry(Some(b[q])).or_default() += 1;
                            *subs.entry(b[q]).or_default().entry(Some(a[p])).or_default() += 1;
                        }
                        AlignOp::Delete(p) => {
                            *occ.entry(a[p]).or_default() += 1;
                            *subs.entry(a[p]).or_default().entry(None).or_default() += 1;
                        }
                        AlignOp::Insert(q) => {
                            *occ.entry(b[q]).or_default() += 1;
                            *subs.entry(b[q]).or_default().entry(None).or_default() += 1;
                        }
                    }
                }
            }
        }
    }

    table_from_counts(&occ, &subs)
}

fn table_from_counts(
    occ: &BTreeMap<char, u64>,
    subs: &BTreeMap<char, BTreeMap<Option<char>, u64>>,
) -> SubstitutionTable {
    let mut rows: Vec<CharSubstitutions> = occ
        .iter()
        .map(|(&ch, &n)| {
            let events = subs.get(&ch).cloned().unwrap_or_default();
            let total: u64 = events.values().sum();
            let mut entries: Vec<SubstitutionEntry> = events
                .into_iter()
                .map(|(target, count)| SubstitutionEntry {
                    target,
                    frequency: 100.0 * count as f64 / total.max(1) as f64,
                })
                .collect();
            entries.sort_by(|x, y| {
                y.frequency
                    .partial_cmp(&x.frequency)
                    .unwrap()
                    .then(x.target.cmp(&y.target))
            });
            CharSubstitutions {
                ch,
                ratio: 100.0 * total as f64 / n as f64,
                entries,
            }
        })
        .collect();
    rows.sort_by(|x, y| y.ratio.partial_cmp(&x.ratio).unwrap().then(x.ch.cmp(&y.ch)));
    SubstitutionTable { rows }
}

/// Tabulates how characters of the `from` outputs are rendered in the
/// `to` outputs, line by line. Unlike the aggregate table this is
/// directional: only source-side characters count as occurrences, so a
/// mapping and its inverse stay separate. When the styles' relation is
/// not an involution the aggregate blends x -> y with the mirrored
/// image of y' -> x and the top target turns ambiguous; the directed
/// table does not.
pub fn accumulate_directed_substitutions(
    from: &[Vec<char>],
    to: &[Vec<char>],
) -> SubstitutionTable {
    let mut occ: BTreeMap<char, u64> = BTreeMap::new();
    let mut subs: BTreeMap<char, BTreeMap<Option<char>, u64>> = BTreeMap::new();
    for (a, b) in from.iter().zip(to) {
        for op in align_weighted(a, b) {
            match op {
                AlignOp::Match(p, _) => {
                    *occ.entry(a[p]).or_default() += 1;
                }
                AlignOp::Substitute(p, q) => {
                    *occ.entry(a[p]).or_default() += 1;
                    *subs.entry(a[p]).or_default().entry(Some(b[q])).or_default() += 1;
                }
                AlignOp::Delete(p) => {
                    *occ.entry(a[p]).or_default() += 1;
                    *subs.entry(a[p]).or_default().entry(None).or_default() += 1;
                }
                AlignOp::Insert(_) => {}
            }
        }
    }
    table_from_counts(&occ, &subs)
}

/// Decodes `lines` under every TSI in `tsis` and tabulates which
/// characters the styles substitute for one another. Fewer than two TSIs
/// yield an empty table.
pub fn substitution_stats(
    model: &Model<f32>,
    alphabet: &Alphabet,
    lines: &[Sample],
    tsis: &[u32],
) -> Result<SubstitutionTable> {
    if tsis.len() < 2 {
        return Ok(SubstitutionTable::default());
    }
    let outputs = decode_all(model, alphabet, lines, tsis)?;
    Ok(accumulate_substitutions(&outputs))
}

/// Decodes `lines` under both TSIs and tabulates how `from`'s output
/// characters are transcribed by `to`.
pub fn directed_substitution_stats(
    model: &Model<f32>,
    alphabet: &Alphabet,
    lines: &[Sample],
    from: u32,
    to: u32,
) -> Result<SubstitutionTable> {
    let outputs = decode_all(model, alphabet, lines, &[from, to])?;
    Ok(accumulate_directed_substitutions(&outputs[0], &outputs[1]))
}

/// CSV rows `char,ratio,rank,target,frequency`; a deleted occurrence
/// appears with the target symbol `∅`.
pub fn substitution_csv(table: &SubstitutionTable) -> String {
    let mut s = String::from("char,ratio,rank,target,frequency\n");
    for row in &table.rows {
        if row.entries.is_empty() {
            s.push_str(&format!("{},{},,,\n", row.ch, row.ratio));
            continue;
        }
        for (rank, e) in row.entries.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                row.ch,
                row.ratio,
                rank + 1,
                e.target.unwrap_or('∅'),
                e.frequency
            ));
        }
    }
    s
}

/// Pearson correlation coefficient; None when either side has no
/// variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDistance {
    pub tsi_a: u32,
    pub tsi_b: u32,
    pub embedding_distance: f64,
    pub mean_edit_distance: f64,
}

#[derive(Debug, Clone)]
pub struct DistanceCorrelation {
    /// None when one of the two distance sets has zero variance.
    pub r: Option<f64>,
    /// True with fewer than 3 TSIs (a single pair correlates trivially).
    pub degenerate: bool,
    pub pairs: Vec<PairDistance>,
    /// Mean output edit distance per TSI pair, usable for MDS.
    pub edit_matrix: Vec<Vec<f64>>,
    pub tsi: Vec<u32>,
}

/// Correlates embedding-space distance with output edit distance over all
/// registered TSI pairs, decoding `lines` under each TSI.
pub fn distance_correlation(
    model: &Model<f32>,
    alphabet: &Alphabet,
    lines: &[Sample],
) -> Result<DistanceCorrelation> {
    let table = model.style_table()?;
    let registered = table.registered();
    if registered.len() < 2 {
        return Err(Error::Analysis(format!(
            "distance correlation needs at least 2 TSI, have {}",
            registered.len()
        )));
    }
    if lines.is_empty() {
        return Err(Error::Analysis("no lines to decode".into()));
    }
    let tsis: Vec<u32> = registered.iter().map(|&(t, _)| t).collect();
    let embeddings: Vec<Vec<f64>> = registered
        .iter()
        .map(|&(_, row)| {
            Ok(table
                .embedding_row(row)?
                .data()
                .iter()
                .map(|&v| f64::from(v))
                .collect())
        })
        .collect::<Result<_>>()?;
    let outputs = decode_all(model, alphabet, lines, &tsis)?;

    let n = tsis.len();
    let mut pairs = Vec::new();
    let mut edit_matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let ed: f64 = (0..lines.len())
                .map(|l| edit_distance(&outputs[i][l], &outputs[j][l]) as f64)
                .sum::<f64>()
                / lines.len() as f64;
            let emb: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            edit_matrix[i][j] = ed;
            edit_matrix[j][i] = ed;
            pairs.push(PairDistance {
                tsi_a: tsis[i],
                tsi_b: tsis[j],
                embedding_distance: emb,
                mean_edit_distance: ed,
            });
        }
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.embedding_distance).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.mean_edit_distance).collect();
    Ok(DistanceCorrelation {
        r: pearson(&xs, &ys),
        degenerate: n < 3,
        pairs,
        edit_matrix,
        tsi: tsis,
    })
}

pub fn pairs_csv(pairs: &[PairDistance]) -> String {
    let mut s = String::from("tsi_a,tsi_b,embedding_distance,mean_edit_distance\n");
    for p in pairs {
        s.push_str(&format!(
            "{},{},{},{}\n",
            p.tsi_a, p.tsi_b, p.embedding_distance, p.mean_edit_distance
        ));
    }
    s
}

pub fn points_csv(tsi: &[u32], points: &[[f64; 2]]) -> String {
    let mut s = String::from("tsi,x,y\n");
    for (t, p) in tsi.iter().zip(points) {
        s.push_str(&format!("{},{},{}\n", t, p[0], p[1]));
    }
    s
}

/// Minimal SVG scatter plot; point classes pick from a fixed palette.
pub fn scatter_svg(tsi: &[u32], points: &[[f64; 2]], classes: &[usize], title: &str) -> String {
    const SIZE: f64 = 480.0;
    const MARGIN: f64 = 48.0;
    const PALETTE: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    if points.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        let span = *hi - *lo;
        if span <= 0.0 {
            *lo -= 1.0;
            *hi += 1.0;
        } else {
            *lo -= 0.1 * span;
            *hi += 0.1 * span;
        }
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (SIZE - 2.0 * MARGIN);
    let sy = |y: f64| SIZE - MARGIN - (y - y0) / (y1 - y0) * (SIZE - 2.0 * MARGIN);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" \
         viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        SIZE / 2.0
    );
    s.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#999\"/>\n",
        SIZE - 2.0 * MARGIN,
        SIZE - 2.0 * MARGIN
    ));
    for ((t, p), &class) in tsi.iter().zip(points).zip(classes) {
        let color = PALETTE[class % PALETTE.len()];
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"{color}\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" \
             font-family=\"sans-serif\" font-size=\"11\">{t}</text>\n",
            sx(p[0]),
            sy(p[1]),
            sx(p[0]) + 7.0,
            sy(p[1]) - 7.0,
        ));
    }
    s.push_str("</svg>\n");
    s
}
