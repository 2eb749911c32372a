//! Synthetic labeled PE corpora with planted byte motifs, plus `path,label`
//! manifest loading for real corpora.
//!
//! Benign and malicious files differ only by motif presence: malicious
//! files carry the motif exactly once inside a section's raw data, benign
//! files are guaranteed motif-free (background collisions are rejected and
//! resampled). That isolates the classifier's job to finding a short
//! informative pattern regardless of where it lands.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pe::{build_pe, PeSection};

pub const MANIFEST_FILENAME: &str = "manifest.csv";
pub const LABEL_BENIGN: u8 = 0;
pub const LABEL_MALICIOUS: u8 = 1;

/// Where the motif lands inside the host section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotifPolicy {
    /// Uniform over every in-section byte offset.
    RandomOffset,
    /// Offsets that are multiples of the conv window, so the motif occupies
    /// exactly one window.
    WindowAligned,
}

/// Section background content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    UniformRandom,
    /// A per-file random 64-byte block tiled across the section.
    RepeatedBlock,
}

/// Recipe for one synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSpec {
    pub n_benign: usize,
    pub n_malicious: usize,
    /// Inclusive target range for file sizes; actual sizes round up to the
    /// 512-byte PE file alignment.
    pub file_size_range: (usize, usize),
    pub motif: Vec<u8>,
    pub motif_policy: MotifPolicy,
    pub background: Background,
    /// Conv window of the model this corpus targets; the alignment unit for
    /// `WindowAligned` and the cap on motif length.
    pub window: usize,
    pub seed: u64,
}

/// Motif baked into the desk-scale experiments: 24 distinctive bytes.
pub const DESK_MOTIF: [u8; 24] = [
    0xDE, 0xAD, 0xBE, 0xEF, 0x13, 0x37, 0xC0, 0xFF, 0xEE, 0x42, 0xA5, 0x5A, 0x99, 0x66, 0x0F,
    0xF0, 0x21, 0x12, 0x84, 0x48, 0xB7, 0x7B, 0x3C, 0xC3,
];

impl CorpusSpec {
    /// Desk-scale recipe: 16 KiB files for the window-32 model. The tiled
    /// background keeps per-file window entropy low enough that the motif
    /// window can win the max pool and receive gradient at this corpus
    /// size.
    pub fn desk(n_benign: usize, n_malicious: usize, seed: u64) -> Self {
        CorpusSpec {
            n_benign,
            n_malicious,
            file_size_range: (16_384, 16_384),
            motif: DESK_MOTIF.to_vec(),
            motif_policy: MotifPolicy::RandomOffset,
            background: Background::RepeatedBlock,
            window: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (min, max) = self.file_size_range;
        if min > max {
            return Err(Error::Input(format!(
                "file size range min {min} > max {max}"
            )));
        }
        if self.window == 0 {
            return Err(Error::Input("window must be positive".into()));
        }
        if self.n_malicious > 0 {
            if self.motif.is_empty() {
                return Err(Error::Input(
                    "motif must be nonempty to generate malicious files".into(),
                ));
            }
            if self.motif.len() > self.window {
                return Err(Error::Input(format!(
                    "motif length {} exceeds window {}",
                    self.motif.len(),
                    self.window
                )));
            }
        }
        Ok(())
    }
}

/// One labeled corpus entry. `path` is the string as written in the
/// manifest (relative paths resolve against the manifest's directory).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
}

/// Ordered list of labeled files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: PathBuf) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Input(format!("duplicate manifest path {}", e.path)));
            }
            if e.label > 1 {
                return Err(Error::Input(format!(
                    "label {} for {} not in {{0, 1}}",
                    e.label, e.path
                )));
            }
        }
        Ok(Manifest { entries, base_dir })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Absolute path of an entry.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn read_file(&self, entry: &ManifestEntry) -> Result<Vec<u8>> {
        fs::read(self.resolve(entry)).map_err(|e| {
            Error::Environment(format!("reading {}: {e}", self.resolve(entry).display()))
        })
    }

    /// Serializes to `path,label` lines, LF terminated, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.path);
            out.push(',');
            out.push_str(&e.label.to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())
            .map_err(|e| Error::Environment(format!("writing {}: {e}", path.display())))
    }
}

/// Parses a `path,label` manifest. A leading `path,label` header line is
/// optional; labels must be 0 or 1.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Environment(format!("reading {}: {e}", path.display())))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.trim() == "path,label" {
            continue;
        }
        let (p, l) = line.rsplit_once(',').ok_or_else(|| {
            Error::Input(format!("manifest line {line_no}: missing comma: {line:?}"))
        })?;
        let label = match l.trim() {
            "0" => LABEL_BENIGN,
            "1" => LABEL_MALICIOUS,
            other => {
                return Err(Error::Input(format!(
                    "manifest line {line_no}: label {other:?} not in {{0, 1}}"
                )))
            }
        };
        if p.is_empty() {
            return Err(Error::Input(format!("manifest line {line_no}: empty path")));
        }
        entries.push(ManifestEntry {
            path: p.to_string(),
            label,
        });
    }
    Manifest::new(entries, base_dir)
}

/// All start offsets where `motif` occurs in `bytes`.
pub fn motif_offsets(bytes: &[u8], motif: &[u8]) -> Vec<usize> {
    if motif.is_empty() || bytes.len() < motif.len() {
        return Vec::new();
    }
    bytes
        .windows(motif.len())
        .enumerate()
        .filter_map(|(i, w)| (w == motif).then_some(i))
        .collect()
}

fn derive_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    mix(seed ^ mix(index.wrapping_add(1)) ^ mix(attempt.wrapping_mul(0x5851_F42D_4C95_7F2D)))
}

fn fill_background(rng: &mut ChaCha8Rng, background: Background, len: usize) -> Vec<u8> {
    match background {
        Background::UniformRandom => {
            let mut buf = vec![0u8; len];
            rng.fill(&mut buf[..]);
            buf
        }
        Background::RepeatedBlock => {
            // One window-sized tile per file: within a file every aligned
            // window shows the same content, so a planted motif is the only
            // window-level anomaly.
            let mut block = [0u8; 32];
            rng.fill(&mut block[..]);
            block.iter().copied().cycle().take(len).collect()
        }
    }
}

/// Builds one corpus file in memory. Returns the file bytes and, for
/// malicious files, the file offset where the motif was planted.
/// Deterministic given the spec, label, and index.
pub fn generate_file_bytes(
    spec: &CorpusSpec,
    label: u8,
    index: usize,
) -> Result<(Vec<u8>, Option<usize>)> {
    spec.validate()?;
    // Two sections: a large host section for content (and the motif) plus a
    // small data section. Headers for two sections occupy one 512-byte
    // alignment unit.
    const HEADERS: usize = 512;
    const DATA_LEN: usize = 256;
    const DATA_RAW: usize = 512;
    const TEXT_BASE: usize = HEADERS;

    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64, attempt));
        let (min, max) = spec.file_size_range;
        let target = if min == max {
            min
        } else {
            rng.random_range(min..=max)
        };
        let text_len = target.saturating_sub(HEADERS + DATA_RAW).max(spec.window.max(64));

        let mut text = fill_background(&mut rng, spec.background, text_len);
        let data = fill_background(&mut rng, spec.background, DATA_LEN);

        let planted = if label == LABEL_MALICIOUS {
            let m = spec.motif.len();
            let rel = match spec.motif_policy {
                MotifPolicy::RandomOffset => rng.random_range(0..=text_len - m),
                MotifPolicy::WindowAligned => {
                    // First window fully inside the section, in file
                    // coordinates.
                    let w = spec.window;
                    let first = TEXT_BASE.div_ceil(w);
                    let last = (TEXT_BASE + text_len - m) / w;
                    if last < first {
                        return Err(Error::Input(
                            "section too small for a window-aligned motif".into(),
                        ));
                    }
                    rng.random_range(first..=last) * w - TEXT_BASE
                }
            };
            text[rel..rel + m].copy_from_slice(&spec.motif);
            Some(TEXT_BASE + rel)
        } else {
            None
        };

        let file = build_pe(
            &[
                PeSection::new(".text", text),
                PeSection::new(".data", data),
            ],
            rng.random(),
        )?;

        // Reject background collisions: benign files must be motif-free,
        // malicious files must contain the motif exactly once.
        let hits = motif_offsets(&file, &spec.motif);
        let ok = match label {
            LABEL_MALICIOUS => hits.len() == 1 && Some(hits[0]) == planted,
            _ => hits.is_empty(),
        };
        if ok {
            return Ok((file, planted));
        }
    }
    Err(Error::Internal(format!(
        "could not produce a collision-free file for motif of {} bytes after 100 attempts",
        spec.motif.len()
    )))
}

/// Generates the corpus on disk: `benign_NNNN.bin` and `malicious_NNNN.bin`
/// files plus `manifest.csv`, all under `out_dir`. Manifest paths are
/// relative, so identical seeds produce byte-identical manifests wherever
/// the corpus lands. Returns the manifest.
pub fn generate(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Environment(format!("creating {}: {e}", out_dir.display())))?;
    let mut entries = Vec::with_capacity(spec.n_benign + spec.n_malicious);
    let mut write_one = |name: String, label: u8, index: usize| -> Result<()> {
        let (bytes, _) = generate_file_bytes(spec, label, index)?;
        fs::write(out_dir.join(&name), bytes)
            .map_err(|e| Error::Environment(format!("writing {name}: {e}")))?;
        entries.push(ManifestEntry { path: name, label });
        Ok(())
    };
    for i in 0..spec.n_benign {
        write_one(format!("benign_{i:04}.bin"), LABEL_BENIGN, i)?;
    }
    for i in 0..spec.n_malicious {
        write_one(
            format!("malicious_{i:04}.bin"),
            LABEL_MALICIOUS,
            spec.n_benign + i,
        )?;
    }
    let manifest = Manifest::new(entries, out_dir.to_path_buf())?;
    manifest.save(&out_dir.join(MANIFEST_FILENAME))?;
    Ok(manifest)
}
