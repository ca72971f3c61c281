//! Vocabulary construction and persistence.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{split_text, GenomeError, N_SPECIAL};
use crate::dicom::{FieldKind, FieldSchema, HeaderField, ProtocolHeader};

const MAGIC: &[u8; 8] = b"PGVOCAB\0";
pub const VOCAB_VERSION: u32 = 1;
const HASH_KEY: &[u8] = b"pg-genome-bucket-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub bins_per_field: usize,
    pub min_word_freq: usize,
    pub hash_bucket_count: u32,
    /// Observed values kept per categorical field (counterfactual candidates).
    pub max_field_values: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            bins_per_field: 32,
            min_word_freq: 2,
            hash_bucket_count: 1 << 15,
            max_field_values: 64,
        }
    }
}

/// Binning scheme for one continuous field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericBins {
    pub edges: Vec<f64>,
    pub centers: Vec<f64>,
    /// Corpus statistics used to standardize regression targets.
    pub mean: f64,
    pub std: f64,
}

impl NumericBins {
    pub fn from_edges_centers(edges: Vec<f64>, centers: Vec<f64>) -> Self {
        assert_eq!(edges.len(), centers.len() + 1, "one center per bin");
        NumericBins {
            edges,
            centers,
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.centers.len()
    }

    /// Bin containing `v`; values outside the edges clamp to the end bins.
    pub fn bin_of(&self, v: f64) -> usize {
        let pp = self.edges.partition_point(|&e| e <= v);
        pp.saturating_sub(1).min(self.n_bins() - 1)
    }

    /// (bin, neighbor bin, weight on bin center). Linear interpolation
    /// between the bin's center and the adjacent center on `v`'s side.
    pub fn locate(&self, v: f64) -> (usize, usize, f64) {
        let b = self.bin_of(v);
        let c = self.centers[b];
        let nb = if v < c && b > 0 {
            b - 1
        } else if v > c && b + 1 < self.n_bins() {
            b + 1
        } else {
            return (b, b, 1.0);
        };
        let cn = self.centers[nb];
        let w = 1.0 - (v - c).abs() / (cn - c).abs();
        (b, nb, w.clamp(0.0, 1.0))
    }

    pub fn interpolate(&self, bin: usize, neighbor: usize, w: f64) -> f64 {
        w * self.centers[bin] + (1.0 - w) * self.centers[neighbor]
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    fn build(values: &mut [f64], k: usize) -> NumericBins {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        if n == 0 {
            return NumericBins {
                edges: vec![0.0, 1.0],
                centers: vec![0.5],
                mean: 0.0,
                std: 1.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };

        let mut distinct: Vec<f64> = values.to_vec();
        distinct.dedup();
        let (edges, centers) = if distinct.len() <= k {
            // One bin per observed value, centered on it.
            let d = &distinct;
            let m = d.len();
            let mut edges = Vec::with_capacity(m + 1);
            if m == 1 {
                edges.push(d[0] - 0.5);
                edges.push(d[0] + 0.5);
            } else {
                edges.push(d[0] - (d[1] - d[0]) / 2.0);
                for w in d.windows(2) {
                    edges.push((w[0] + w[1]) / 2.0);
                }
                edges.push(d[m - 1] + (d[m - 1] - d[m - 2]) / 2.0);
            }
            (edges, d.clone())
        } else {
            let mut edges: Vec<f64> = (0..=k)
                .map(|i| quantile_sorted(values, i as f64 / k as f64))
                .collect();
            edges.dedup();
            let nb = edges.len() - 1;
            let mut sums = vec![0.0; nb];
            let mut counts = vec![0usize; nb];
            let proto = NumericBins::from_edges_centers(edges.clone(), vec![0.0; nb]);
            for &v in values.iter() {
                let b = proto.bin_of(v);
                sums[b] += v;
                counts[b] += 1;
            }
            let centers = (0..nb)
                .map(|b| {
                    if counts[b] > 0 {
                        sums[b] / counts[b] as f64
                    } else {
                        (edges[b] + edges[b + 1]) / 2.0
                    }
                })
                .collect();
            (edges, centers)
        };
        NumericBins {
            edges,
            centers,
            mean,
            std,
        }
    }
}

/// Linear-interpolated quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-field vocabulary entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub name: String,
    pub kind: FieldKind,
    /// Continuous fields only.
    pub bins: Option<NumericBins>,
    /// First token id of this field's bin range (continuous fields only).
    pub bin_token_base: u32,
    /// Most frequent observed texts (categorical fields only).
    pub observed_values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenomeVocab {
    pub version: u32,
    pub schema: FieldSchema,
    #[serde(with = "hex_32")]
    pub schema_hash: [u8; 32],
    pub config: VocabConfig,
    /// Learned words in id order (id = N_SPECIAL + index).
    pub words: Vec<String>,
    #[serde(skip)]
    word_ids: BTreeMap<String, u32>,
    pub fields: Vec<FieldEntry>,
}

mod hex_32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("schema hash must be 32 bytes"))
    }
}

impl GenomeVocab {
    /// Learns the word list, per-field bins, and observed values.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a ProtocolHeader>,
        schema: &FieldSchema,
        config: &VocabConfig,
    ) -> Result<Self, GenomeError> {
        let nf = schema.fields.len();
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); nf];
        let mut texts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); nf];
        let mut n_headers = 0usize;
        for h in corpus {
            n_headers += 1;
            check_schema(h, schema)?;
            for (i, f) in h.fields.iter().enumerate() {
                match f {
                    HeaderField::Categorical { text, .. } => {
                        for w in split_text(text) {
                            *word_freq.entry(w).or_default() += 1;
                        }
                        *texts[i].entry(text.clone()).or_default() += 1;
                    }
                    HeaderField::Continuous { value, .. } => numeric[i].push(*value),
                    HeaderField::Missing { .. } => {}
                }
            }
        }
        if n_headers == 0 {
            return Err(GenomeError::EmptyCorpus);
        }
        // A corpus smaller than the frequency threshold keeps every word.
        let min_freq = config.min_word_freq.min(n_headers).max(1);
        let words: Vec<String> = word_freq
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .map(|(w, _)| w)
            .collect();
        let learned = N_SPECIAL + words.len() as u32;
        let mut next_bin = learned + config.hash_bucket_count;
        let fields = schema
            .fields
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (bins, base) = match spec.kind {
                    FieldKind::Continuous => {
                        let b = NumericBins::build(&mut numeric[i], config.bins_per_field.max(1));
                        let base = next_bin;
                        next_bin += b.n_bins() as u32;
                        (Some(b), base)
                    }
                    FieldKind::Categorical => (None, 0),
                };
                let mut observed: Vec<(String, usize)> =
                    std::mem::take(&mut texts[i]).into_iter().collect();
                observed.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                observed.truncate(config.max_field_values);
                FieldEntry {
                    name: spec.name.clone(),
                    kind: spec.kind,
                    bins,
                    bin_token_base: base,
                    observed_values: observed.into_iter().map(|(t, _)| t).collect(),
                }
            })
            .collect();
        let mut v = GenomeVocab {
            version: VOCAB_VERSION,
            schema: schema.clone(),
            schema_hash: schema.hash(),
            config: config.clone(),
            words,
            word_ids: BTreeMap::new(),
            fields,
        };
        v.index_words();
        Ok(v)
    }

    fn index_words(&mut self) {
        self.word_ids = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), N_SPECIAL + i as u32))
            .collect();
    }

    /// Specials plus learned words: the categorical prediction space.
    pub fn learned_size(&self) -> u32 {
        N_SPECIAL + self.words.len() as u32
    }

    pub fn hash_base(&self) -> u32 {
        self.learned_size()
    }

    pub fn bin_base(&self) -> u32 {
        self.learned_size() + self.config.hash_bucket_count
    }

    pub fn total_bins(&self) -> u32 {
        self.fields
            .iter()
            .filter_map(|f| f.bins.as_ref())
            .map(|b| b.n_bins() as u32)
            .sum()
    }

    /// Size of the full token id space.
    pub fn size(&self) -> u32 {
        self.bin_base() + self.total_bins()
    }

    pub fn word_id(&self, w: &str) -> Option<u32> {
        self.word_ids.get(w).copied()
    }

    /// OOV words route to a keyed hash bucket, or [UNK] when no buckets exist.
    pub fn token_for_word(&self, w: &str) -> u32 {
        if let Some(id) = self.word_id(w) {
            return id;
        }
        if self.config.hash_bucket_count == 0 {
            return super::UNK;
        }
        self.hash_base() + bucket_of(w, self.config.hash_bucket_count)
    }

    pub fn is_hash_token(&self, id: u32) -> bool {
        id >= self.hash_base() && id < self.bin_base()
    }

    pub fn is_bin_token(&self, id: u32) -> bool {
        id >= self.bin_base() && id < self.size()
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        id.checked_sub(N_SPECIAL)
            .and_then(|i| self.words.get(i as usize))
            .map(String::as_str)
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn continuous_fields(&self) -> impl Iterator<Item = (usize, &FieldEntry)> {
        self.fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FieldKind::Continuous)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GenomeError> {
        let mut v: GenomeVocab =
            serde_json::from_str(text).map_err(|e| GenomeError::Format(e.to_string()))?;
        v.validate()?;
        v.index_words();
        Ok(v)
    }

    fn validate(&self) -> Result<(), GenomeError> {
        if self.schema.hash() != self.schema_hash {
            return Err(GenomeError::Format("schema hash mismatch".into()));
        }
        for f in &self.fields {
            if let Some(b) = &f.bins {
                if b.edges.len() != b.centers.len() + 1
                    || b.edges.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(GenomeError::Format(format!("bad bin edges for {}", f.name)));
                }
            }
        }
        Ok(())
    }

    /// Versioned little-endian binary encoding.
    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, self.version);
        b.extend_from_slice(&self.schema_hash);
        put_str(&mut b, &serde_json::to_string(&self.schema).expect("schema serializes"));
        put_u32(&mut b, self.config.bins_per_field as u32);
        put_u32(&mut b, self.config.min_word_freq as u32);
        put_u32(&mut b, self.config.hash_bucket_count);
        put_u32(&mut b, self.config.max_field_values as u32);
        put_u32(&mut b, self.words.len() as u32);
        for word in &self.words {
            put_str(&mut b, word);
        }
        put_u32(&mut b, self.fields.len() as u32);
        for f in &self.fields {
            match &f.bins {
                Some(bins) => {
                    b.push(1);
                    put_u32(&mut b, f.bin_token_base);
                    put_f64s(&mut b, &bins.edges);
                    put_f64s(&mut b, &bins.centers);
                    b.extend_from_slice(&bins.mean.to_le_bytes());
                    b.extend_from_slice(&bins.std.to_le_bytes());
                }
                None => b.push(0),
            }
            put_u32(&mut b, f.observed_values.len() as u32);
            for v in &f.observed_values {
                put_str(&mut b, v);
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        w.write_all(&b)
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self, GenomeError> {
        let mut all = Vec::new();
        r.read_to_end(&mut all)
            .map_err(|e| GenomeError::Format(e.to_string()))?;
        if all.len() < MAGIC.len() + 4 + 32 + 32 || &all[..8] != MAGIC {
            return Err(GenomeError::Format("not a vocab file".into()));
        }
        let (body, digest) = all.split_at(all.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(GenomeError::Format("vocab checksum mismatch".into()));
        }
        let mut c = Reader { b: body, pos: 8 };
        let version = c.u32()?;
        if version != VOCAB_VERSION {
            return Err(GenomeError::Format(format!("unsupported vocab version {version}")));
        }
        let schema_hash: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
        let schema: FieldSchema = serde_json::from_str(&c.string()?)
            .map_err(|e| GenomeError::Format(e.to_string()))?;
        let config = VocabConfig {
            bins_per_field: c.u32()? as usize,
            min_word_freq: c.u32()? as usize,
            hash_bucket_count: c.u32()?,
            max_field_values: c.u32()? as usize,
        };
        let nw = c.u32()? as usize;
        let words = (0..nw).map(|_| c.string()).collect::<Result<Vec<_>, _>>()?;
        let nf = c.u32()? as usize;
        if nf != schema.fields.len() {
            return Err(GenomeError::Format("field count differs from schema".into()));
        }
        let mut fields = Vec::with_capacity(nf);
        for spec in &schema.fields {
            let has_bins = c.take(1)?[0] == 1;
            let (bins, base) = if has_bins {
                let base = c.u32()?;
                let edges = c.f64s()?;
                let centers = c.f64s()?;
                let mean = c.f64()?;
                let std = c.f64()?;
                (
                    Some(NumericBins {
                        edges,
                        centers,
                        mean,
                        std,
                    }),
                    base,
                )
            } else {
                (None, 0)
            };
            let nv = c.u32()? as usize;
            let observed_values = (0..nv).map(|_| c.string()).collect::<Result<Vec<_>, _>>()?;
            fields.push(FieldEntry {
                name: spec.name.clone(),
                kind: spec.kind,
                bins,
                bin_token_base: base,
                observed_values,
            });
        }
        let mut v = GenomeVocab {
            version,
            schema,
            schema_hash,
            config,
            words,
            word_ids: BTreeMap::new(),
            fields,
        };
        v.validate()?;
        v.index_words();
        Ok(v)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_binary(&mut out).expect("writing to memory");
        out
    }
}

/// Keyed, process-independent hash bucket for an OOV word.
pub fn bucket_of(word: &str, buckets: u32) -> u32 {
    let mut h = Sha256::new();
    h.update(HASH_KEY);
    h.update(word.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (v % buckets as u64) as u32
}

pub(crate) fn check_schema(h: &ProtocolHeader, schema: &FieldSchema) -> Result<(), GenomeError> {
    if h.fields.len() != schema.fields.len() {
        return Err(GenomeError::SchemaMismatch(format!(
            "header has {} fields, schema {}",
            h.fields.len(),
            schema.fields.len()
        )));
    }
    for (f, spec) in h.fields.iter().zip(&schema.fields) {
        let kind_ok = match f {
            HeaderField::Categorical { .. } => spec.kind == FieldKind::Categorical,
            HeaderField::Continuous { value, .. } => {
                spec.kind == FieldKind::Continuous && value.is_finite()
            }
            HeaderField::Missing { .. } => true,
        };
        if f.name() != spec.name || !kind_ok {
            return Err(GenomeError::SchemaMismatch(format!(
                "field {:?} does not match schema entry {:?}",
                f.name(),
                spec.name
            )));
        }
    }
    Ok(())
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    put_u32(b, v.len() as u32);
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GenomeError> {
        if n > self.b.len() - self.pos {
            return Err(GenomeError::Format("truncated vocab file".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GenomeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, GenomeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, GenomeError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| GenomeError::Format(e.to_string()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, GenomeError> {
        let n = self.u32()? as usize;
        if n > (self.b.len() - self.pos) / 8 {
            return Err(GenomeError::Format("truncated vocab file".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}
