//! Exact nearest-neighbour search over scan and CAD embeddings, the
//! scan/CAD confusion score, annotation proposals, and the `SCEM` file
//! format.
//!
//! CAD models may be stored once per rotation step; every query collapses
//! those copies to the closest one per object.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::voxel::ROTATION_STEPS;
use crate::{Error, Result};

/// Size of the latent-space neighbourhood proposals are drawn from.
pub const PROPOSAL_POOL: usize = 30;
/// Proposals shown per annotation task.
pub const PROPOSALS: usize = 6;

const MAGIC: &[u8; 4] = b"SCEM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Scan,
    Cad,
}

impl Domain {
    pub fn code(self) -> u8 {
        match self {
            Domain::Scan => 0,
            Domain::Cad => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Domain::Scan),
            1 => Some(Domain::Cad),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Scan => "scan",
            Domain::Cad => "cad",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(Domain::Scan),
            "cad" => Ok(Domain::Cad),
            _ => Err(Error::InvalidArgument(format!("unknown domain `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub id: String,
    pub domain: Domain,
    pub category: String,
    pub rotation_step: u8,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(id: impl Into<String>, domain: Domain, category: impl Into<String>, values: Vec<f32>) -> Self {
        EmbeddingVector {
            id: id.into(),
            domain,
            category: category.into(),
            rotation_step: 0,
            values,
        }
    }

    pub fn with_rotation(mut self, step: u8) -> Self {
        self.rotation_step = step;
        self
    }
}

/// A ranked search result; `distance` is exact in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub domain: Domain,
    pub category: String,
    pub distance: f64,
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Append-only collection of equal-length embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingIndex {
    dimension: usize,
    vectors: Vec<EmbeddingVector>,
    keys: HashSet<(String, Domain, u8)>,
}

impl EmbeddingIndex {
    pub fn new(dimension: usize) -> Self {
        EmbeddingIndex {
            dimension,
            ..Default::default()
        }
    }

    pub fn from_vectors(dimension: usize, vectors: impl IntoIterator<Item = EmbeddingVector>) -> Result<Self> {
        let mut index = Self::new(dimension);
        for v in vectors {
            index.push(v)?;
        }
        Ok(index)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn push(&mut self, v: EmbeddingVector) -> Result<()> {
        if v.values.len() != self.dimension {
            return Err(Error::Shape(format!(
                "`{}` has {} values, index dimension is {}",
                v.id,
                v.values.len(),
                self.dimension
            )));
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("`{}` has non-finite values", v.id)));
        }
        if v.rotation_step >= ROTATION_STEPS {
            return Err(Error::InvalidArgument(format!("`{}` has rotation step {}", v.id, v.rotation_step)));
        }
        if !self.keys.insert((v.id.clone(), v.domain, v.rotation_step)) {
            return Err(Error::InvalidArgument(format!(
                "duplicate {} `{}` at rotation {}",
                v.domain, v.id, v.rotation_step
            )));
        }
        self.vectors.push(v);
        Ok(())
    }

    /// The unrotated entry for `(id, domain)`.
    pub fn get(&self, id: &str, domain: Domain) -> Option<&EmbeddingVector> {
        self.vectors
            .iter()
            .find(|v| v.id == id && v.domain == domain && v.rotation_step == 0)
    }

    /// Entry by id alone when it is unambiguous across domains.
    pub fn find(&self, id: &str) -> Result<&EmbeddingVector> {
        let hits: Vec<&EmbeddingVector> = self.vectors.iter().filter(|v| v.id == id && v.rotation_step == 0).collect();
        match hits.len() {
            0 => Err(Error::UnknownId(id.to_string())),
            1 => Ok(hits[0]),
            _ => Err(Error::InvalidArgument(format!("id `{id}` exists in both domains"))),
        }
    }

    /// Every distinct object accepted by `keep`, ordered by distance to
    /// `query` (closest rotation copy per object), ties by id then domain.
    pub fn ranked(&self, query: &[f32], keep: impl Fn(&EmbeddingVector) -> bool) -> Vec<Neighbor> {
        let mut best: BTreeMap<(&str, Domain), (f64, &str)> = BTreeMap::new();
        for v in self.vectors.iter().filter(|v| keep(v)) {
            let d = euclidean(query, &v.values);
            best.entry((v.id.as_str(), v.domain))
                .and_modify(|e| {
                    if d < e.0 {
                        e.0 = d;
                    }
                })
                .or_insert((d, v.category.as_str()));
        }
        let mut out: Vec<Neighbor> = best
            .into_iter()
            .map(|((id, domain), (distance, category))| Neighbor {
                id: id.to_string(),
                domain,
                category: category.to_string(),
                distance,
            })
            .collect();
        out.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.id.cmp(&b.id))
                .then_with(|| a.domain.cmp(&b.domain))
        });
        out
    }

    /// The `k` nearest distinct objects to `query`. With `exclude_self`, the
    /// object sharing the query's id and domain is skipped.
    pub fn knn(&self, query: &EmbeddingVector, k: usize, exclude_self: bool) -> Result<Vec<Neighbor>> {
        self.knn_in(query, k, exclude_self, None)
    }

    /// [`knn`](Self::knn) restricted to one domain when `domain` is given.
    pub fn knn_in(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude_self: bool,
        domain: Option<Domain>,
    ) -> Result<Vec<Neighbor>> {
        let ranked = self.ranked(&query.values, |v| {
            domain.is_none_or(|d| v.domain == d) && !(exclude_self && v.id == query.id && v.domain == query.domain)
        });
        if k > ranked.len() {
            return Err(Error::NotEnoughCandidates(format!(
                "k = {k} but only {} distinct objects are searchable",
                ranked.len()
            )));
        }
        Ok(ranked.into_iter().take(k).collect())
    }

    /// Copy holding only unrotated entries.
    pub fn unrotated(&self) -> EmbeddingIndex {
        let mut out = EmbeddingIndex::new(self.dimension);
        for v in self.vectors.iter().filter(|v| v.rotation_step == 0) {
            out.push(v.clone()).expect("subset of a valid index");
        }
        out
    }
}

/// Mean share of cross-domain neighbours among each object's `k` nearest,
/// averaged separately over scans and over CAD models, then between the two.
/// 0.5 means the domains are perfectly mixed. Only unrotated entries count.
pub fn confusion_score(index: &EmbeddingIndex, k: usize) -> Result<f64> {
    let objects = index.unrotated();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if objects.len() < k + 1 {
        return Err(Error::NotEnoughCandidates(format!(
            "confusion at k = {k} needs {} objects, have {}",
            k + 1,
            objects.len()
        )));
    }
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for v in objects.vectors() {
        let nn = objects.knn(v, k, true)?;
        let cross = nn.iter().filter(|n| n.domain != v.domain).count();
        let slot = v.domain.code() as usize;
        sums[slot] += cross as f64 / k as f64;
        counts[slot] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::InvalidArgument("confusion needs both scan and CAD embeddings".into()));
    }
    Ok(0.5 * (sums[0] / counts[0] as f64 + sums[1] / counts[1] as f64))
}

/// Six CAD ids drawn uniformly without replacement from the 30 nearest
/// autoencoder latents of `associated_cad_id` (which is itself a member of
/// that pool). Deterministic in `seed`.
pub fn propose_candidates(ae_index: &EmbeddingIndex, associated_cad_id: &str, seed: u64) -> Result<Vec<String>> {
    let query = ae_index
        .get(associated_cad_id, Domain::Cad)
        .ok_or_else(|| Error::UnknownId(associated_cad_id.to_string()))?;
    let pool = ae_index
        .knn_in(query, PROPOSAL_POOL, false, Some(Domain::Cad))
        .map_err(|_| {
            Error::NotEnoughCandidates(format!("proposals need at least {PROPOSAL_POOL} CAD latents"))
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), PROPOSALS)
        .into_iter()
        .map(|i| pool[i].id.clone())
        .collect())
}

fn put_str16<W: Write>(w: &mut W, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::format("SCEM", format!("{what} longer than 65535 bytes")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("SCEM", format!("truncated: {e}")))?;
    Ok(b)
}

fn get_str16<R: Read>(r: &mut R) -> Result<String> {
    let len = u16::from_le_bytes(get(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format("SCEM", format!("truncated: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::format("SCEM", "string is not UTF-8"))
}

pub fn write_embeddings<W: Write>(mut w: W, index: &EmbeddingIndex) -> Result<()> {
    let count = u32::try_from(index.len()).map_err(|_| Error::format("SCEM", "too many records"))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&(index.dimension() as u32).to_le_bytes())?;
    for v in index.vectors() {
        put_str16(&mut w, &v.id, "id")?;
        w.write_all(&[v.domain.code(), v.rotation_step])?;
        put_str16(&mut w, &v.category, "category")?;
        let mut buf = Vec::with_capacity(v.values.len() * 4);
        for x in &v.values {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<EmbeddingIndex> {
    if &get::<4, _>(&mut r)? != MAGIC {
        return Err(Error::format("SCEM", "bad magic"));
    }
    let version = u32::from_le_bytes(get(&mut r)?);
    if version != VERSION {
        return Err(Error::format("SCEM", format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(get(&mut r)?);
    let dim = u32::from_le_bytes(get(&mut r)?) as usize;
    let mut index = EmbeddingIndex::new(dim);
    for _ in 0..count {
        let id = get_str16(&mut r)?;
        let [code, rotation_step] = get::<2, _>(&mut r)?;
        let domain = Domain::from_code(code).ok_or_else(|| Error::format("SCEM", format!("domain code {code}")))?;
        let category = get_str16(&mut r)?;
        let mut buf = vec![0u8; dim * 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::format("SCEM", format!("truncated: {e}")))?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        index.push(EmbeddingVector {
            id,
            domain,
            category,
            rotation_step,
            values,
        })?;
    }
    Ok(index)
}

pub fn write_embeddings_file(path: impl AsRef<Path>, index: &EmbeddingIndex) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_embeddings(&mut w, index)?;
    w.flush()?;
    Ok(())
}

pub fn read_embeddings_file(path: impl AsRef<Path>) -> Result<EmbeddingIndex> {
    read_embeddings(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(id: &str, d: Domain, values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(id, d, "c", values.to_vec())
    }

    #[test]
    fn exact_match_comes_first() {
        let idx = EmbeddingIndex::from_vectors(
            2,
            [v("a", Domain::Cad, &[0.0, 0.0]), v("b", Domain::Cad, &[1.0, 0.0]), v("c", Domain::Cad, &[3.0, 0.0])],
        )
        .unwrap();
        let q = v("q", Domain::Scan, &[1.0, 0.0]);
        let nn = idx.knn(&q, 3, false).unwrap();
        assert_eq!(nn[0].id, "b");
        assert_eq!(nn[0].distance, 0.0);
        assert_eq!(nn.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
        assert!(idx.knn(&q, 4, false).is_err());
        let own = idx.knn(&idx.vectors()[1], 2, true).unwrap();
        assert!(own.iter().all(|n| n.id != "b"));
    }

    #[test]
    fn ties_break_by_id() {
        let idx = EmbeddingIndex::from_vectors(1, [v("z", Domain::Cad, &[1.0]), v("m", Domain::Cad, &[-1.0])]).unwrap();
        let nn = idx.knn(&v("q", Domain::Scan, &[0.0]), 2, false).unwrap();
        assert_eq!(nn[0].id, "m");
    }

    #[test]
    fn rotation_copies_collapse_to_the_closest() {
        let mut idx = EmbeddingIndex::new(1);
        for (step, x) in [(0u8, 5.0f32), (1, 0.5), (2, 9.0)] {
            idx.push(v("chair", Domain::Cad, &[x]).with_rotation(step)).unwrap();
        }
        idx.push(v("table", Domain::Cad, &[1.0])).unwrap();
        let nn = idx.knn(&v("q", Domain::Scan, &[0.0]), 2, false).unwrap();
        assert_eq!(nn[0].id, "chair");
        assert_eq!(nn[0].distance, 0.5);
        assert!(idx.knn(&v("q", Domain::Scan, &[0.0]), 3, false).is_err());
        assert!(idx.push(v("chair", Domain::Cad, &[1.0]).with_rotation(1)).is_err());
    }

    #[test]
    fn segregated_and_balanced_confusion() {
        let mut idx = EmbeddingIndex::new(1);
        for i in 0..4 {
            idx.push(v(&format!("s{i}"), Domain::Scan, &[i as f32])).unwrap();
            idx.push(v(&format!("c{i}"), Domain::Cad, &[1000.0 + i as f32])).unwrap();
        }
        assert_eq!(confusion_score(&idx, 2).unwrap(), 0.0);

        // Alternating on a line: with k = 2 every interior object has one
        // neighbour of each domain; on a ring all do.
        let mut ring = EmbeddingIndex::new(2);
        let n = 8;
        for i in 0..n {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let d = if i % 2 == 0 { Domain::Scan } else { Domain::Cad };
            ring.push(v(&format!("o{i}"), d, &[a.cos() as f32, a.sin() as f32])).unwrap();
        }
        // Each object's two nearest are its ring neighbours, both of the other domain.
        assert_eq!(confusion_score(&ring, 2).unwrap(), 1.0);
        assert!(confusion_score(&ring, 8).is_err());
    }

    #[test]
    fn proposals_are_six_distinct_pool_members() {
        let mut idx = EmbeddingIndex::new(1);
        for i in 0..40 {
            idx.push(v(&format!("cad{i:02}"), Domain::Cad, &[i as f32])).unwrap();
        }
        let p = propose_candidates(&idx, "cad00", 5).unwrap();
        assert_eq!(p.len(), 6);
        let set: HashSet<&String> = p.iter().collect();
        assert_eq!(set.len(), 6);
        assert!(p.iter().all(|id| id.as_str() < "cad30"));
        assert_eq!(p, propose_candidates(&idx, "cad00", 5).unwrap());
        assert!(propose_candidates(&idx, "missing", 5).is_err());
        let small = EmbeddingIndex::from_vectors(1, (0..29).map(|i| v(&format!("c{i}"), Domain::Cad, &[i as f32]))).unwrap();
        assert!(propose_candidates(&small, "c0", 1).is_err());
    }

    #[test]
    fn scem_round_trip_and_rejections() {
        let mut idx = EmbeddingIndex::new(3);
        idx.push(EmbeddingVector::new("s", Domain::Scan, "chair", vec![1.0, -2.0, 0.5])).unwrap();
        idx.push(EmbeddingVector::new("c", Domain::Cad, "table", vec![0.0, 3.25, 1e-3]).with_rotation(7)).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &idx).unwrap();
        assert_eq!(&buf[..4], b"SCEM");
        assert_eq!(read_embeddings(&buf[..]).unwrap(), idx);
        assert!(read_embeddings(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_embeddings(&bad[..]).is_err());
    }

    #[test]
    fn push_validates() {
        let mut idx = EmbeddingIndex::new(2);
        assert!(idx.push(v("a", Domain::Cad, &[1.0])).is_err());
        assert!(idx.push(v("a", Domain::Cad, &[f32::NAN, 0.0])).is_err());
        idx.push(v("a", Domain::Cad, &[0.0, 0.0])).unwrap();
        idx.push(v("a", Domain::Scan, &[0.0, 0.0])).unwrap();
        assert!(idx.find("a").is_err());
    }
}
