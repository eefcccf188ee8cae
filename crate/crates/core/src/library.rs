//! Policy libraries and their on-disk container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "ADHOCLIB" | version u32 | feature_dim u32 | n_actions u32 | gamma f64 | entries u32
//! per entry:
//!   meta_len u32 | meta (JSON)
//!   sf_rows u64  | { key_len u32 | key | n_actions*feature_dim f64 }*
//!   dr_rows u64  | { key_len u32 | key | n_actions f64 }*
//! sha256 of everything above (32 bytes)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffreward::{DrQTable, DrWeight};
use crate::error::{Error, Result};
use crate::mmdp::{ObsEncoding, ObsKey};
use crate::sfql::{SfLearnerPolicy, SfTable};
use crate::vector::WeightVector;

pub const MAGIC: &[u8; 8] = b"ADHOCLIB";
pub const FORMAT_VERSION: u32 = 1;

/// What produced an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Learner,
    Oracle,
    Robust,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub timesteps: u64,
    pub episodes: u64,
    pub hyperparams_hash: String,
    #[serde(default)]
    pub team_draws: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLibraryEntry {
    pub kind: EntryKind,
    pub policy: SfLearnerPolicy,
    pub source_team_id: String,
    pub dr_weight: Option<DrWeight>,
    pub dr_q: Option<DrQTable>,
    pub meta: TrainingMeta,
}

impl PolicyLibraryEntry {
    pub fn new(kind: EntryKind, policy: SfLearnerPolicy, source_team_id: impl Into<String>, meta: TrainingMeta) -> Self {
        PolicyLibraryEntry {
            kind,
            policy,
            source_team_id: source_team_id.into(),
            dr_weight: None,
            dr_q: None,
            meta,
        }
    }

    pub fn sf(&self) -> &SfTable {
        &self.policy.sf
    }

    pub fn dr_evaluated(&self) -> bool {
        self.dr_weight.is_some() || self.dr_q.is_some()
    }
}

/// Ordered set of pretrained policies sharing feature dimension, action set
/// and discount.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLibrary {
    pub feature_dim: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub entries: Vec<PolicyLibraryEntry>,
}

#[derive(Serialize, Deserialize)]
struct DrQHeader {
    n_actions: usize,
    episodes_used: usize,
    alpha: f64,
    gamma: f64,
    source_team_id: String,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    kind: EntryKind,
    source_team_id: String,
    feature_dim: usize,
    task_weight: WeightVector,
    encoding: ObsEncoding,
    #[serde(default)]
    segment: Option<usize>,
    training: TrainingMeta,
    dr_weight: Option<DrWeight>,
    dr_q: Option<DrQHeader>,
}

impl PolicyLibrary {
    pub fn new(feature_dim: usize, n_actions: usize, gamma: f64) -> Self {
        PolicyLibrary { feature_dim, n_actions, gamma, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: PolicyLibraryEntry) -> Result<()> {
        self.check_entry(&entry)?;
        self.entries.push(entry);
        Ok(())
    }

    fn check_entry(&self, e: &PolicyLibraryEntry) -> Result<()> {
        use crate::sfql::SfApproximator;
        if e.policy.task_weight.len() != self.feature_dim || e.sf().feature_dim() != self.feature_dim {
            return Err(Error::Load(format!(
                "entry feature dimension {} differs from library dimension {}",
                e.sf().feature_dim(),
                self.feature_dim
            )));
        }
        if e.sf().n_actions() != self.n_actions {
            return Err(Error::Load("entry action count differs from the library".into()));
        }
        if (e.sf().gamma() - self.gamma).abs() > 0.0 {
            return Err(Error::Load("entry discount differs from the library".into()));
        }
        if let Some(w) = &e.dr_weight {
            if w.weights.len() != self.feature_dim {
                return Err(Error::Load("difference-reward weights have the wrong dimension".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((self.feature_dim as u32).to_le_bytes());
        out.extend((self.n_actions as u32).to_le_bytes());
        out.extend(self.gamma.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            use crate::sfql::SfApproximator;
            let meta = EntryMeta {
                kind: e.kind,
                source_team_id: e.source_team_id.clone(),
                feature_dim: e.sf().feature_dim(),
                task_weight: e.policy.task_weight.clone(),
                encoding: e.policy.encoding,
                segment: e.sf().segment(),
                training: e.meta.clone(),
                dr_weight: e.dr_weight.clone(),
                dr_q: e.dr_q.as_ref().map(|q| DrQHeader {
                    n_actions: q.n_actions,
                    episodes_used: q.episodes_used,
                    alpha: q.alpha,
                    gamma: q.gamma,
                    source_team_id: q.source_team_id.clone(),
                }),
            };
            let json = serde_json::to_vec(&meta)?;
            out.extend((json.len() as u32).to_le_bytes());
            out.extend(json);
            let rows = e.sf().sorted_rows();
            out.extend((rows.len() as u64).to_le_bytes());
            for (key, row) in rows {
                write_record(&mut out, key, row);
            }
            match &e.dr_q {
                Some(q) => {
                    let rows = q.sorted_rows();
                    out.extend((rows.len() as u64).to_le_bytes());
                    for (key, row) in rows {
                        write_record(&mut out, key, row);
                    }
                }
                None => out.extend(0u64.to_le_bytes()),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Checksum);
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: payload, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Load("not a policy library (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!("unsupported library version {version}")));
        }
        let feature_dim = r.u32()? as usize;
        let n_actions = r.u32()? as usize;
        let gamma = r.f64()?;
        let count = r.u32()? as usize;
        let mut lib = PolicyLibrary::new(feature_dim, n_actions, gamma);
        for i in 0..count {
            let len = r.u32()? as usize;
            let meta: EntryMeta = serde_json::from_slice(r.take(len)?)?;
            if meta.feature_dim != feature_dim || meta.task_weight.len() != feature_dim {
                return Err(Error::Load(format!(
                    "entry {i} has feature dimension {}, library header says {feature_dim}",
                    meta.feature_dim
                )));
            }
            let mut sf = match meta.segment {
                Some(seg) => SfTable::factored(feature_dim, n_actions, gamma, seg),
                None => SfTable::new(feature_dim, n_actions, gamma),
            };
            let rows = r.u64()?;
            for _ in 0..rows {
                let (key, row) = r.record(sf.row_width())?;
                sf.insert_row(key, row)?;
            }
            let dr_rows = r.u64()?;
            let dr_q = match meta.dr_q {
                Some(h) => {
                    let mut q = DrQTable::new(h.n_actions, h.alpha, h.gamma, h.source_team_id);
                    q.episodes_used = h.episodes_used;
                    for _ in 0..dr_rows {
                        let (key, row) = r.record(h.n_actions)?;
                        q.values.insert(key, row);
                    }
                    Some(q)
                }
                None if dr_rows == 0 => None,
                None => return Err(Error::Load("difference-reward rows without a header".into())),
            };
            let policy = SfLearnerPolicy { sf, task_weight: meta.task_weight, encoding: meta.encoding };
            let entry = PolicyLibraryEntry {
                kind: meta.kind,
                policy,
                source_team_id: meta.source_team_id,
                dr_weight: meta.dr_weight,
                dr_q,
                meta: meta.training,
            };
            lib.push(entry)?;
        }
        if r.pos != payload.len() {
            return Err(Error::Load("trailing bytes after the last entry".into()));
        }
        Ok(lib)
    }

    /// Writes atomically: a temporary sibling is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a file.
pub fn file_checksum(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_record(out: &mut Vec<u8>, key: &ObsKey, row: &[f64]) {
    out.extend((key.0.len() as u32).to_le_bytes());
    out.extend_from_slice(&key.0);
    for v in row {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Load("unexpected end of library payload".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self, width: usize) -> Result<(ObsKey, Vec<f64>)> {
        let len = self.u32()? as usize;
        let key = ObsKey(self.take(len)?.to_vec());
        let row = (0..width).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((key, row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfql::SfApproximator;

    fn entry(dim: usize, tag: u8) -> PolicyLibraryEntry {
        let mut sf = SfTable::new(dim, 5, 0.95);
        for k in 0..4u8 {
            sf.insert_row(ObsKey(vec![tag, k]), (0..5 * dim).map(|i| i as f64 * 0.1 + k as f64).collect()).unwrap();
        }
        let policy = SfLearnerPolicy { sf, task_weight: WeightVector(vec![1.0; dim]), encoding: ObsEncoding::Absolute };
        PolicyLibraryEntry::new(EntryKind::Learner, policy, format!("team{tag}"), TrainingMeta { seed: tag as u64, ..Default::default() })
    }

    fn two_entry_library() -> PolicyLibrary {
        let mut lib = PolicyLibrary::new(3, 5, 0.95);
        let mut a = entry(3, 1);
        a.dr_weight = Some(DrWeight {
            weights: WeightVector(vec![0.1, 0.7999999999999999, 1.0 / 3.0]),
            residual_rms: 0.01,
            samples: 120,
            rank: 3,
            ridge: 0.0,
            source_team_id: "team1".into(),
        });
        let mut b = entry(3, 2);
        let mut q = DrQTable::new(5, 0.1, 0.95, "team2");
        q.values.insert(ObsKey(vec![9]), vec![0.5, 0.25, 0.0, 1.0, -0.125]);
        q.episodes_used = 2500;
        b.dr_q = Some(q);
        lib.push(a).unwrap();
        lib.push(b).unwrap();
        lib
    }

    #[test]
    fn round_trip_is_exact_and_byte_stable() {
        let lib = two_entry_library();
        let bytes = lib.to_bytes().unwrap();
        let back = PolicyLibrary::from_bytes(&bytes).unwrap();
        assert_eq!(back, lib);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = two_entry_library().to_bytes().unwrap();
        for cut in [1, 10, bytes.len() / 2] {
            let err = PolicyLibrary::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(matches!(err, Error::Checksum), "{err}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0xff;
        assert!(matches!(PolicyLibrary::from_bytes(&flipped), Err(Error::Checksum)));
    }

    #[test]
    fn inconsistent_feature_dims_fail_to_load() {
        let lib = PolicyLibrary { feature_dim: 3, n_actions: 5, gamma: 0.95, entries: vec![entry(3, 1), entry(4, 2)] };
        let bytes = lib.to_bytes().unwrap();
        assert!(matches!(PolicyLibrary::from_bytes(&bytes), Err(Error::Load(_))));
    }

    #[test]
    fn version_mismatch_fails_to_load() {
        let mut bytes = two_entry_library().to_bytes().unwrap();
        bytes[8] = 2;
        let n = bytes.len();
        let digest = Sha256::digest(&bytes[..n - 32]);
        bytes[n - 32..].copy_from_slice(&digest);
        assert!(matches!(PolicyLibrary::from_bytes(&bytes), Err(Error::Load(_))));
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.bin");
        let lib = two_entry_library();
        lib.save(&path).unwrap();
        assert_eq!(PolicyLibrary::load(&path).unwrap(), lib);
        let missing = PolicyLibrary::load(&dir.path().join("nope.bin")).unwrap_err();
        assert!(matches!(missing, Error::MissingArtifact(_)));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn factored_tables_round_trip() {
        let mut sf = SfTable::factored(3, 5, 0.95, 2);
        sf.td_update(&ObsKey(vec![1, 2, 3, 4, 5, 6, 7]), 3, &[1.0, -0.5, 0.25], 0.5);
        let policy = SfLearnerPolicy { sf, task_weight: WeightVector(vec![1.0; 3]), encoding: ObsEncoding::Absolute };
        let mut lib = PolicyLibrary::new(3, 5, 0.95);
        lib.push(PolicyLibraryEntry::new(EntryKind::Robust, policy, "all", TrainingMeta::default())).unwrap();
        let back = PolicyLibrary::from_bytes(&lib.to_bytes().unwrap()).unwrap();
        assert_eq!(back, lib);
        assert_eq!(back.entries[0].sf().segment(), Some(2));
    }
}
