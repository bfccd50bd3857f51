//! Interaction and feature files, k-core filtering, id remapping and a
//! planted-factor synthetic dataset.
//!
//! Interactions are UTF-8 text with one `user<TAB>item` pair per line;
//! blank lines and lines starting with `#` are ignored. Feature matrices use
//! the little-endian `FMAT` layout: magic, `u32` version 1, `u32` rows,
//! `u32` cols, then `rows·cols` `f32` values row-major.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::ItemFeatures;
use crate::tensor::Tensor;

/// De-duplicated `(user token, item token)` pairs in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawInteractions {
    pub pairs: Vec<(String, String)>,
}

impl RawInteractions {
    /// Builds from pairs, dropping repeats.
    pub fn from_pairs<I, U, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (U, T)>,
        U: Into<String>,
        T: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (u, i) in pairs {
            let p = (u.into(), i.into());
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        RawInteractions { pairs: out }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Parses interaction text. Line numbers in errors are 1-based.
pub fn parse_interactions<R: Read>(input: R) -> Result<RawInteractions> {
    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        match fields.as_slice() {
            [u, i] if !u.trim().is_empty() && !i.trim().is_empty() => {
                pairs.push((u.trim().to_string(), i.trim().to_string()));
            }
            _ => {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("expected `user<TAB>item`, got {trimmed:?}"),
                })
            }
        }
    }
    Ok(RawInteractions::from_pairs(pairs))
}

pub fn load_interactions(path: &Path) -> Result<RawInteractions> {
    parse_interactions(std::fs::File::open(path)?)
}

/// Writes pairs as `user<TAB>item` lines.
pub fn write_interactions<W: Write>(mut out: W, pairs: &[(String, String)]) -> Result<()> {
    let mut buf = String::new();
    for (u, i) in pairs {
        buf.push_str(u);
        buf.push('\t');
        buf.push_str(i);
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

/// Dense ids for users and items, assigned in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Mapping {
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    /// `(user id, item id)` for every raw pair, in input order.
    pub pairs: Vec<(usize, usize)>,
}

impl Mapping {
    pub fn users(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn items(&self) -> usize {
        self.item_tokens.len()
    }

    /// Item ids of each user, in input order.
    pub fn per_user(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.users()];
        for &(u, i) in &self.pairs {
            out[u].push(i);
        }
        out
    }

    /// Back to token pairs.
    pub fn unmap(&self) -> RawInteractions {
        RawInteractions {
            pairs: self
                .pairs
                .iter()
                .map(|&(u, i)| (self.user_tokens[u].clone(), self.item_tokens[i].clone()))
                .collect(),
        }
    }
}

pub fn remap(raw: &RawInteractions) -> Mapping {
    let mut users: HashMap<&str, usize> = HashMap::new();
    let mut items: HashMap<&str, usize> = HashMap::new();
    let mut m = Mapping::default();
    for (u, i) in &raw.pairs {
        let uid = *users.entry(u).or_insert_with(|| {
            m.user_tokens.push(u.clone());
            m.user_tokens.len() - 1
        });
        let iid = *items.entry(i).or_insert_with(|| {
            m.item_tokens.push(i.clone());
            m.item_tokens.len() - 1
        });
        m.pairs.push((uid, iid));
    }
    m
}

/// Writes `token<TAB>dense_id` lines.
pub fn write_mapping<W: Write>(mut out: W, tokens: &[String]) -> Result<()> {
    let mut buf = String::new();
    for (id, t) in tokens.iter().enumerate() {
        buf.push_str(&format!("{t}\t{id}\n"));
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// none remain. Order of the surviving pairs is preserved.
pub fn kcore_filter(raw: &RawInteractions, k: usize) -> Result<RawInteractions> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    let mut alive: Vec<bool> = vec![true; raw.pairs.len()];
    loop {
        let mut udeg: HashMap<&str, usize> = HashMap::new();
        let mut ideg: HashMap<&str, usize> = HashMap::new();
        for ((u, i), _) in raw.pairs.iter().zip(&alive).filter(|(_, a)| **a) {
            *udeg.entry(u).or_default() += 1;
            *ideg.entry(i).or_default() += 1;
        }
        let mut changed = false;
        for ((u, i), a) in raw.pairs.iter().zip(alive.iter_mut()) {
            if *a && (udeg[u.as_str()] < k || ideg[i.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let pairs: Vec<(String, String)> = raw
        .pairs
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(p, _)| p.clone())
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no interactions survive {k}-core filtering of {} pairs",
            raw.len()
        )));
    }
    Ok(RawInteractions { pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Text,
}

/// A per-item feature matrix of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    /// `(rows, cols)`.
    pub values: Tensor,
}

const FMAT_MAGIC: &[u8; 4] = b"FMAT";
const FMAT_VERSION: u32 = 1;
const FMAT_HEADER: usize = 16;

/// Encodes a matrix as `FMAT` bytes; values are narrowed to `f32`.
pub fn encode_fmat(values: &Tensor) -> Result<Vec<u8>> {
    if values.rank() != 2 {
        return Err(Error::dim(format!(
            "FMAT stores matrices, got shape {:?}",
            values.shape()
        )));
    }
    let mut out = Vec::with_capacity(FMAT_HEADER + 4 * values.len());
    out.extend_from_slice(FMAT_MAGIC);
    out.extend_from_slice(&FMAT_VERSION.to_le_bytes());
    for e in [values.rows(), values.cols()] {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} overflows u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in values.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes `FMAT` bytes, widening to `f64`.
pub fn decode_fmat(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < FMAT_HEADER {
        return Err(Error::Length {
            what: "FMAT header".into(),
            expected: FMAT_HEADER as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != FMAT_MAGIC {
        return Err(Error::Format("not an FMAT file (bad magic)".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
    if word(1) != FMAT_VERSION {
        return Err(Error::Format(format!("unsupported FMAT version {}", word(1))));
    }
    let (rows, cols) = (word(2) as usize, word(3) as usize);
    let expected = FMAT_HEADER as u64 + 4 * rows as u64 * cols as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            what: format!("FMAT payload for {rows}x{cols}"),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f64> = bytes[FMAT_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "FMAT value at row {}, col {} is not finite",
            k / cols.max(1),
            k % cols.max(1)
        )));
    }
    Tensor::new(&[rows, cols], values).map_err(|e| Error::Format(format!("FMAT payload: {e}")))
}

pub fn save_fmat(path: &Path, values: &Tensor) -> Result<()> {
    std::fs::write(path, encode_fmat(values)?)?;
    Ok(())
}

pub fn load_fmat(path: &Path) -> Result<Tensor> {
    decode_fmat(&std::fs::read(path)?)
}

pub fn load_features(path: &Path, modality: Modality) -> Result<FeatureMatrix> {
    Ok(FeatureMatrix {
        modality,
        values: load_fmat(path)?,
    })
}

/// A dataset ready for splitting: dense ids and item features aligned with
/// them.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub mapping: Mapping,
    pub features: ItemFeatures,
}

/// Loads interactions and both feature files. Feature rows follow the item
/// ids of the unfiltered file; with `kcore > 0` the interactions are
/// filtered afterwards and the surviving items' rows are kept.
pub fn load_dataset(interactions: &Path, visual: &Path, text: &Path, kcore: usize) -> Result<LoadedData> {
    let raw = load_interactions(interactions)?;
    if raw.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} holds no interactions",
            interactions.display()
        )));
    }
    let visual = load_features(visual, Modality::Visual)?.values;
    let text = load_features(text, Modality::Text)?.values;
    assemble(&raw, visual, text, kcore)
}

/// The in-memory part of [`load_dataset`].
pub fn assemble(raw: &RawInteractions, visual: Tensor, text: Tensor, kcore: usize) -> Result<LoadedData> {
    let full = remap(raw);
    for (name, t) in [("visual", &visual), ("text", &text)] {
        if t.rows() != full.items() {
            return Err(Error::dim(format!(
                "{name} features have {} rows but the interactions name {} items",
                t.rows(),
                full.items()
            )));
        }
    }
    if kcore == 0 {
        return Ok(LoadedData {
            mapping: full,
            features: ItemFeatures::new(visual, text)?,
        });
    }
    let filtered = remap(&kcore_filter(raw, kcore)?);
    let index: HashMap<&str, usize> = full
        .item_tokens
        .iter()
        .enumerate()
        .map(|(k, t)| (t.as_str(), k))
        .collect();
    let rows: Vec<usize> = filtered.item_tokens.iter().map(|t| index[t.as_str()]).collect();
    Ok(LoadedData {
        features: ItemFeatures::new(visual.gather_rows(&rows)?, text.gather_rows(&rows)?)?,
        mapping: filtered,
    })
}

/// Parameters of the planted-factor generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    pub per_user: usize,
    pub d_visual: usize,
    pub d_text: usize,
    /// Noise level relative to the signal: per-row noise norm over
    /// expected signal norm.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            users: 300,
            items: 200,
            latent_dim: 8,
            per_user: 20,
            d_visual: 256,
            d_text: 128,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Generated dataset with dense ids already in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    /// Item ids per user, highest latent affinity first.
    pub per_user: Vec<Vec<usize>>,
    pub visual: Tensor,
    pub text: Tensor,
    /// `(M, ℓ)`.
    pub user_latent: Tensor,
    /// `(N', ℓ)` for the items that received interactions.
    pub item_latent: Tensor,
}

impl SynthData {
    pub fn items(&self) -> usize {
        self.item_latent.rows()
    }

    pub fn interactions(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    pub fn density(&self) -> f64 {
        self.interactions() as f64 / (self.per_user.len() * self.items()) as f64
    }

    pub fn raw(&self) -> RawInteractions {
        RawInteractions {
            pairs: self
                .per_user
                .iter()
                .enumerate()
                .flat_map(|(u, items)| items.iter().map(move |i| (format!("u{u}"), format!("i{i}"))))
                .collect(),
        }
    }

    /// Users then items, one latent vector per row.
    pub fn latents(&self) -> Result<Tensor> {
        let mut v = self.user_latent.data().to_vec();
        v.extend_from_slice(self.item_latent.data());
        Tensor::new(
            &[
                self.user_latent.rows() + self.item_latent.rows(),
                self.user_latent.cols(),
            ],
            v,
        )
    }
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Samples unit-Gaussian latents, gives each user its top `per_user` items
/// by latent inner product, and derives both modalities as fixed random
/// linear maps of the item latents plus `noise`-scaled Gaussian noise.
/// Both parts are scaled so a feature row has expected squared norm
/// `1 + noise²` whatever its width.
/// Items nobody picked are dropped and ids are renumbered by first
/// appearance in user-major order.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    let SynthSpec {
        users,
        items,
        latent_dim: l,
        per_user,
        d_visual,
        d_text,
        noise,
        seed,
    } = *spec;
    if users == 0 || items == 0 || l == 0 || per_user == 0 || d_visual == 0 || d_text == 0 {
        return Err(Error::param(format!(
            "synthetic spec needs positive sizes, got {spec:?}"
        )));
    }
    if per_user >= items {
        return Err(Error::param(format!(
            "{per_user} interactions per user leaves no negatives among {items} items"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::param(format!("noise level {noise} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_latent = gaussian(&[users, l], 1.0, &mut rng)?;
    let item_latent = gaussian(&[items, l], 1.0, &mut rng)?;
    let map_v = gaussian(&[l, d_visual], 1.0 / ((l * d_visual) as f64).sqrt(), &mut rng)?;
    let map_t = gaussian(&[l, d_text], 1.0 / ((l * d_text) as f64).sqrt(), &mut rng)?;

    let mut picks = Vec::with_capacity(users);
    for u in 0..users {
        let mut scored: Vec<(f64, usize)> = (0..items)
            .map(|i| {
                let s = user_latent
                    .row(u)
                    .iter()
                    .zip(item_latent.row(i))
                    .map(|(a, b)| a * b)
                    .sum();
                (s, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        picks.push(scored[..per_user].iter().map(|&(_, i)| i).collect::<Vec<_>>());
    }
    let mut new_id: Vec<Option<usize>> = vec![None; items];
    let mut order = Vec::new();
    for list in &picks {
        for &i in list {
            if new_id[i].is_none() {
                new_id[i] = Some(order.len());
                order.push(i);
            }
        }
    }
    let per_user = picks
        .iter()
        .map(|l| l.iter().map(|&i| new_id[i].unwrap()).collect())
        .collect();
    let item_latent = item_latent.gather_rows(&order)?;
    let n = order.len();
    let project = |map: &Tensor, d: usize, rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let z = item_latent.row(i);
            for (j, slot) in out[i * d..(i + 1) * d].iter_mut().enumerate() {
                let clean: f64 = (0..l).map(|k| z[k] * map.data()[k * d + j]).sum();
                let e: f64 = StandardNormal.sample(rng);
                *slot = clean + noise * e / (d as f64).sqrt();
            }
        }
        Tensor::new(&[n, d], out)
    };
    let visual = project(&map_v, d_visual, &mut rng)?;
    let text = project(&map_t, d_text, &mut rng)?;
    Ok(SynthData {
        per_user,
        visual,
        text,
        user_latent,
        item_latent,
    })
}

/// File names written by [`write_synth`].
pub const SYNTH_FILES: [&str; 4] = ["interactions.tsv", "visual.fmat", "text.fmat", "latents.fmat"];

/// Writes the four synthetic files into `dir`.
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tsv = Vec::new();
    write_interactions(&mut tsv, &data.raw().pairs)?;
    std::fs::write(dir.join(SYNTH_FILES[0]), tsv)?;
    save_fmat(&dir.join(SYNTH_FILES[1]), &data.visual)?;
    save_fmat(&dir.join(SYNTH_FILES[2]), &data.text)?;
    save_fmat(&dir.join(SYNTH_FILES[3]), &data.latents()?)?;
    Ok(())
}
