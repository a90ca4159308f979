//! Descriptor matching: mutual-nearest-neighbor brute force with ratio and
//! angular-distance gates, plus an epipolar-guided second round.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::geometry::{self, FundamentalMatrix};
use crate::refnet::Keypoint;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("descriptor sets have mismatched dimensions: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("keypoint and descriptor counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("match io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad match file: {0}")]
    BadFile(String),
}

/// One correspondence between two descriptor sets, with the cosine
/// similarity that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct MatchOptions {
    /// Require mutual nearest neighbors.
    pub cross_check: bool,
    /// Lowe ratio gate on angular distances (best / second-best); 1.0
    /// disables it.
    pub max_ratio: f64,
    /// Maximum angular distance, in radians, between matched descriptors.
    pub max_distance: f64,
    /// Maximum directed epipolar distance, in pixels, for the guided round.
    pub max_error: f64,
    /// Fundamental-matrix estimation settings for the guided round.
    pub ransac_threshold: f64,
    pub ransac_iters: usize,
    pub ransac_seed: u64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            cross_check: true,
            max_ratio: 1.0,
            max_distance: 1.0,
            max_error: 4.0,
            ransac_threshold: 1.0,
            ransac_iters: 2000,
            ransac_seed: 0,
        }
    }
}

/// Result of guided matching: the final matches plus whether geometry
/// estimation succeeded. When it did not (too few seed matches or a
/// degenerate scene) the brute-force matches are returned unchanged.
#[derive(Debug, Clone)]
pub struct GuidedMatches {
    pub matches: Vec<Match>,
    pub geometry_used: bool,
    pub fundamental: Option<FundamentalMatrix>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Angular distance between unit descriptors. The dot product is clamped so
/// round-off never feeds acos an out-of-range value.
fn angular_distance(similarity: f64) -> f64 {
    similarity.clamp(-1.0, 1.0).acos()
}

/// Nearest and second-nearest neighbors of `query` in `set`, by cosine
/// similarity. Returns (best index, best similarity, second similarity).
/// Ties go to the lower index.
fn two_nearest(query: &[f64], set: &[Vec<f64>]) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::NEG_INFINITY;
    for (i, d) in set.iter().enumerate() {
        let s = dot(query, d);
        match best {
            Some((_, bs)) if s <= bs => {
                if s > second {
                    second = s;
                }
            }
            _ => {
                if let Some((_, bs)) = best {
                    second = bs;
                }
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, s)| (i, s, second))
}

/// Mutual-nearest-neighbor matching with ratio and angular-distance gates.
/// Matches come back sorted by `index_a`.
pub fn match_brute_force(
    desc_a: &[Vec<f64>],
    desc_b: &[Vec<f64>],
    options: &MatchOptions,
) -> Result<Vec<Match>, MatchError> {
    if let (Some(a), Some(b)) = (desc_a.first(), desc_b.first()) {
        if a.len() != b.len() {
            return Err(MatchError::DimMismatch(a.len(), b.len()));
        }
    }
    if desc_a.is_empty() || desc_b.is_empty() {
        return Ok(Vec::new());
    }
    // nearest neighbor of every b in a, for the cross check
    let back: Vec<usize> = if options.cross_check {
        desc_b
            .iter()
            .map(|d| two_nearest(d, desc_a).unwrap().0)
            .collect()
    } else {
        Vec::new()
    };
    let mut out = Vec::new();
    for (ia, da) in desc_a.iter().enumerate() {
        let (ib, sim, second) = two_nearest(da, desc_b).unwrap();
        let best_dist = angular_distance(sim);
        if best_dist > options.max_distance {
            continue;
        }
        if options.max_ratio < 1.0 && second > f64::NEG_INFINITY {
            let second_dist = angular_distance(second);
            if second_dist > 0.0 && best_dist / second_dist > options.max_ratio {
                continue;
            }
        }
        if options.cross_check && back[ib] != ia {
            continue;
        }
        out.push(Match { index_a: ia, index_b: ib, similarity: sim });
    }
    Ok(out)
}

/// Two-round matching: brute force, fundamental-matrix estimation on the
/// seed matches, then a second nearest-neighbor search restricted to
/// candidates within `max_error` pixels of the epipolar line. The second
/// round replaces the first. If fewer than 8 seed matches exist or the
/// estimation fails, the seed matches are returned with
/// `geometry_used = false`.
pub fn match_guided(
    kps_a: &[Keypoint],
    desc_a: &[Vec<f64>],
    kps_b: &[Keypoint],
    desc_b: &[Vec<f64>],
    options: &MatchOptions,
) -> Result<GuidedMatches, MatchError> {
    if kps_a.len() != desc_a.len() {
        return Err(MatchError::CountMismatch(kps_a.len(), desc_a.len()));
    }
    if kps_b.len() != desc_b.len() {
        return Err(MatchError::CountMismatch(kps_b.len(), desc_b.len()));
    }
    let seed = match_brute_force(desc_a, desc_b, options)?;
    if seed.len() < 8 {
        return Ok(GuidedMatches { matches: seed, geometry_used: false, fundamental: None });
    }
    let pairs: Vec<([f64; 2], [f64; 2])> = seed
        .iter()
        .map(|m| (kps_a[m.index_a].xy, kps_b[m.index_b].xy))
        .collect();
    let f = match geometry::estimate_fundamental_ransac(
        &pairs,
        options.ransac_threshold,
        options.ransac_iters,
        options.ransac_seed,
    ) {
        Ok((f, _)) => f,
        Err(_) => {
            return Ok(GuidedMatches { matches: seed, geometry_used: false, fundamental: None })
        }
    };

    // epipolar gate: candidate j in b is admissible for i in a when the
    // distance from b_j to the line F a_i is within max_error, and
    // symmetrically for the cross check
    let admissible = |i: usize, j: usize| -> bool {
        geometry::epipolar_distance(&f, kps_a[i].xy, kps_b[j].xy) <= options.max_error
    };
    let gated_nearest = |query: &[f64], set: &[Vec<f64>], keep: &dyn Fn(usize) -> bool| {
        let mut best: Option<(usize, f64)> = None;
        let mut second = f64::NEG_INFINITY;
        for (j, d) in set.iter().enumerate() {
            if !keep(j) {
                continue;
            }
            let s = dot(query, d);
            match best {
                Some((_, bs)) if s <= bs => {
                    if s > second {
                        second = s;
                    }
                }
                _ => {
                    if let Some((_, bs)) = best {
                        second = bs;
                    }
                    best = Some((j, s));
                }
            }
        }
        best.map(|(j, s)| (j, s, second))
    };

    let ft = f.transpose();
    let mut out = Vec::new();
    for (ia, da) in desc_a.iter().enumerate() {
        let Some((ib, sim, second)) = gated_nearest(da, desc_b, &|j| admissible(ia, j)) else {
            continue;
        };
        let best_dist = angular_distance(sim);
        if best_dist > options.max_distance {
            continue;
        }
        if options.max_ratio < 1.0 && second > f64::NEG_INFINITY {
            let second_dist = angular_distance(second);
            if second_dist > 0.0 && best_dist / second_dist > options.max_ratio {
                continue;
            }
        }
        if options.cross_check {
            // reverse direction: candidates in a within max_error of the
            // line F^T b_j
            let back = gated_nearest(&desc_b[ib], desc_a, &|i| {
                geometry::epipolar_distance(&ft, kps_b[ib].xy, kps_a[i].xy) <= options.max_error
            });
            if back.map(|(i, _, _)| i) != Some(ia) {
                continue;
            }
        }
        out.push(Match { index_a: ia, index_b: ib, similarity: sim });
    }
    Ok(GuidedMatches { matches: out, geometry_used: true, fundamental: Some(f) })
}

// ---------------------------------------------------------------------------
// match file: u64 count, then per match u64 index_a, u64 index_b,
// f64 similarity (little endian)

pub fn save_matches(matches: &[Match], path: &Path) -> Result<(), MatchError> {
    let io_err = |e| MatchError::Io { path: path.display().to_string(), source: e };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    (|| -> std::io::Result<()> {
        f.write_u64::<LittleEndian>(matches.len() as u64)?;
        for m in matches {
            f.write_u64::<LittleEndian>(m.index_a as u64)?;
            f.write_u64::<LittleEndian>(m.index_b as u64)?;
            f.write_f64::<LittleEndian>(m.similarity)?;
        }
        Ok(())
    })()
    .map_err(io_err)
}

pub fn load_matches(path: &Path) -> Result<Vec<Match>, MatchError> {
    let io_err = |e| MatchError::Io { path: path.display().to_string(), source: e };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let count = f.read_u64::<LittleEndian>().map_err(io_err)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let a = f.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let b = f.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        let s = f.read_f64::<LittleEndian>().map_err(io_err)?;
        out.push(Match { index_a: a, index_b: b, similarity: s });
    }
    let mut trailing = [0u8; 1];
    match f.read(&mut trailing).map_err(io_err)? {
        0 => Ok(out),
        _ => Err(MatchError::BadFile("trailing bytes".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Straightforward O(n*m) reference: for each a find argmax similarity
    /// in b (ties to lower index), apply distance and ratio gates, then
    /// cross check against the symmetric search.
    fn reference_match(desc_a: &[Vec<f64>], desc_b: &[Vec<f64>], opt: &MatchOptions) -> Vec<Match> {
        let nearest = |q: &[f64], set: &[Vec<f64>]| -> (usize, f64, f64) {
            let sims: Vec<f64> = set.iter().map(|d| dot(q, d)).collect();
            let mut order: Vec<usize> = (0..sims.len()).collect();
            order.sort_by(|&i, &j| sims[j].partial_cmp(&sims[i]).unwrap().then(i.cmp(&j)));
            let best = order[0];
            let second = order.get(1).map(|&i| sims[i]).unwrap_or(f64::NEG_INFINITY);
            (best, sims[best], second)
        };
        let mut out = Vec::new();
        for (ia, da) in desc_a.iter().enumerate() {
            let (ib, sim, second) = nearest(da, desc_b);
            let d = angular_distance(sim);
            if d > opt.max_distance {
                continue;
            }
            if opt.max_ratio < 1.0 && second > f64::NEG_INFINITY {
                let d2 = angular_distance(second);
                if d2 > 0.0 && d / d2 > opt.max_ratio {
                    continue;
                }
            }
            if opt.cross_check && nearest(&desc_b[ib], desc_a).0 != ia {
                continue;
            }
            out.push(Match { index_a: ia, index_b: ib, similarity: sim });
        }
        out
    }

    #[test]
    fn brute_force_matches_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..50 {
            let na = rng.gen_range(1..30);
            let nb = rng.gen_range(1..30);
            let a: Vec<_> = (0..na).map(|_| random_unit(&mut rng, 16)).collect();
            let b: Vec<_> = (0..nb).map(|_| random_unit(&mut rng, 16)).collect();
            let opt = MatchOptions {
                cross_check: case % 2 == 0,
                max_ratio: if case % 3 == 0 { 0.9 } else { 1.0 },
                max_distance: if case % 5 == 0 { 0.8 } else { 1.0 },
                ..Default::default()
            };
            assert_eq!(match_brute_force(&a, &b, &opt).unwrap(), reference_match(&a, &b, &opt));
        }
    }

    #[test]
    fn identical_sets_match_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<_> = (0..20).map(|_| random_unit(&mut rng, 32)).collect();
        let matches = match_brute_force(&a, &a, &MatchOptions::default()).unwrap();
        assert_eq!(matches.len(), 20);
        for m in matches {
            assert_eq!(m.index_a, m.index_b);
            assert!((m.similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_property() {
        // swapping the sets mirrors the match list when cross checking
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<_> = (0..15).map(|_| random_unit(&mut rng, 16)).collect();
        let b: Vec<_> = (0..18).map(|_| random_unit(&mut rng, 16)).collect();
        let opt = MatchOptions::default();
        let ab = match_brute_force(&a, &b, &opt).unwrap();
        let ba = match_brute_force(&b, &a, &opt).unwrap();
        let mut mirrored: Vec<(usize, usize)> = ba.iter().map(|m| (m.index_b, m.index_a)).collect();
        mirrored.sort();
        let forward: Vec<(usize, usize)> = ab.iter().map(|m| (m.index_a, m.index_b)).collect();
        assert_eq!(forward, mirrored);
    }

    #[test]
    fn tighter_distance_gate_is_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<_> = (0..25).map(|_| random_unit(&mut rng, 16)).collect();
        let b: Vec<_> = (0..25).map(|_| random_unit(&mut rng, 16)).collect();
        let loose = match_brute_force(&a, &b, &MatchOptions::default()).unwrap();
        let tight = match_brute_force(
            &a,
            &b,
            &MatchOptions { max_distance: 0.5, ..Default::default() },
        )
        .unwrap();
        for m in &tight {
            assert!(loose.contains(m));
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![1.0, 0.0, 0.0]];
        assert!(matches!(
            match_brute_force(&a, &b, &MatchOptions::default()),
            Err(MatchError::DimMismatch(2, 3))
        ));
    }

    #[test]
    fn empty_sets_match_empty() {
        let a: Vec<Vec<f64>> = Vec::new();
        let b = vec![vec![1.0, 0.0]];
        assert!(match_brute_force(&a, &b, &MatchOptions::default()).unwrap().is_empty());
        assert!(match_brute_force(&b, &a, &MatchOptions::default()).unwrap().is_empty());
    }

    /// Two-view scene with descriptors: true correspondences get nearly
    /// identical descriptors, plus distractor keypoints whose descriptors
    /// are close enough to confuse unguided matching.
    fn guided_fixture(
        seed: u64,
    ) -> (Vec<Keypoint>, Vec<Vec<f64>>, Vec<Keypoint>, Vec<Vec<f64>>, Vec<(usize, usize)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = crate::geometry::tests::two_view_scene(seed, 40);
        let mut kps_a = Vec::new();
        let mut kps_b = Vec::new();
        let mut desc_a = Vec::new();
        let mut desc_b = Vec::new();
        let mut truth = Vec::new();
        for (i, (pa, pb)) in pairs.iter().enumerate() {
            let d = random_unit(&mut rng, 32);
            kps_a.push(Keypoint { xy: *pa, score: 1.0 });
            kps_b.push(Keypoint { xy: *pb, score: 1.0 });
            desc_a.push(d.clone());
            // small perturbation keeps true pairs mutual nearest neighbors
            let noisy: Vec<f64> =
                d.iter().map(|v| v + rng.gen_range(-0.01..0.01)).collect();
            desc_b.push(unit(noisy));
            truth.push((i, i));
        }
        // distractors in b: near-duplicates of existing descriptors at
        // geometrically wrong positions, far from the epipolar lines
        for i in 0..10 {
            let base = &desc_a[i];
            let decoy: Vec<f64> = base.iter().map(|v| v + rng.gen_range(-0.002..0.002)).collect();
            kps_b.push(Keypoint {
                xy: [kps_b[i].xy[0] + 200.0, kps_b[i].xy[1] + 200.0],
                score: 1.0,
            });
            desc_b.push(unit(decoy));
        }
        (kps_a, desc_a, kps_b, desc_b, truth)
    }

    #[test]
    fn guided_matching_recovers_decoy_corrupted_pairs() {
        let (kps_a, desc_a, kps_b, desc_b, truth) = guided_fixture(7);
        let opt = MatchOptions { ransac_threshold: 0.5, ..Default::default() };
        let plain = match_brute_force(&desc_a, &desc_b, &opt).unwrap();
        let guided = match_guided(&kps_a, &desc_a, &kps_b, &desc_b, &opt).unwrap();
        assert!(guided.geometry_used);
        let correct = |ms: &[Match]| {
            ms.iter().filter(|m| truth.contains(&(m.index_a, m.index_b))).count()
        };
        assert!(correct(&guided.matches) > correct(&plain));
        assert_eq!(correct(&guided.matches), truth.len());
    }

    #[test]
    fn guided_matches_respect_epipolar_gate() {
        let (kps_a, desc_a, kps_b, desc_b, _) = guided_fixture(9);
        let opt = MatchOptions { ransac_threshold: 0.5, ..Default::default() };
        let guided = match_guided(&kps_a, &desc_a, &kps_b, &desc_b, &opt).unwrap();
        let f = guided.fundamental.unwrap();
        for m in &guided.matches {
            let d = crate::geometry::epipolar_distance(&f, kps_a[m.index_a].xy, kps_b[m.index_b].xy);
            assert!(d <= opt.max_error);
        }
    }

    #[test]
    fn guided_falls_back_below_eight_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let kps: Vec<Keypoint> = (0..4)
            .map(|i| Keypoint { xy: [i as f64 * 10.0, 5.0], score: 1.0 })
            .collect();
        let descs: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, 8)).collect();
        let out = match_guided(&kps, &descs, &kps, &descs, &MatchOptions::default()).unwrap();
        assert!(!out.geometry_used);
        assert_eq!(out.matches.len(), 4);
    }

    #[test]
    fn match_file_round_trip() {
        let ms = vec![
            Match { index_a: 0, index_b: 3, similarity: 0.97 },
            Match { index_a: 2, index_b: 1, similarity: -0.25 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.match");
        save_matches(&ms, &path).unwrap();
        assert_eq!(load_matches(&path).unwrap(), ms);
    }
}

