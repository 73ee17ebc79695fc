use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::media::{encode_ppm, ImageFrame};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const META_FILE: &str = "manifest.meta";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus needs at least one image")]
    Empty,
    #[error("image dimensions must be positive, got {0}x{1}")]
    ZeroDimension(u32, u32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed metadata: {reason}")]
    Meta { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A generated image corpus: newline-separated relative paths in
/// `manifest.txt`, with dimensions and seed in a `manifest.meta` sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<String>,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn path_of(&self, entry: &str) -> PathBuf {
        self.root.join(entry)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads a manifest from its `manifest.txt` path or from the corpus directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let manifest = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();

        let meta_path = root.join(META_FILE);
        let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let bad = |reason: String| CorpusError::Meta {
            path: meta_path.clone(),
            reason,
        };
        let (mut width, mut height, mut seed) = (None, None, None);
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let v = v.trim();
            let num = |v: &str| v.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")));
            match k.trim() {
                "width" => width = Some(num(v)? as u32),
                "height" => height = Some(num(v)? as u32),
                "seed" => seed = Some(num(v)?),
                _ => {}
            }
        }
        Ok(Self {
            root,
            entries,
            width: width.ok_or_else(|| bad("missing width".into()))?,
            height: height.ok_or_else(|| bad("missing height".into()))?,
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
        })
    }
}

/// Deterministic image `index` of the corpus for `seed`.
pub fn corpus_image(index: u64, width: u32, height: u32, seed: u64) -> ImageFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut pixels = vec![0u8; width as usize * height as usize * 3];
    rng.fill_bytes(&mut pixels);
    ImageFrame::new(width, height, pixels).expect("sized from dimensions")
}

/// Writes `n` pseudo-random PPM images plus manifest under `root`.
/// The same arguments always produce byte-identical files.
pub fn gen_corpus(
    root: impl AsRef<Path>,
    n: usize,
    width: u32,
    height: u32,
    seed: u64,
) -> Result<CorpusManifest, CorpusError> {
    if n == 0 {
        return Err(CorpusError::Empty);
    }
    if width == 0 || height == 0 {
        return Err(CorpusError::ZeroDimension(width, height));
    }
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(io_err(root))?;
    let digits = n.to_string().len().max(5);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("img_{i:0digits$}.ppm");
        let path = root.join(&name);
        let bytes = encode_ppm(&corpus_image(i as u64, width, height, seed));
        fs::write(&path, bytes).map_err(io_err(&path))?;
        entries.push(name);
    }
    let manifest = root.join(MANIFEST_FILE);
    let mut text = entries.join("\n");
    text.push('\n');
    fs::write(&manifest, text).map_err(io_err(&manifest))?;
    let meta = root.join(META_FILE);
    fs::write(
        &meta,
        format!("count={n}\nwidth={width}\nheight={height}\nseed={seed}\n"),
    )
    .map_err(io_err(&meta))?;
    Ok(CorpusManifest {
        root: root.to_path_buf(),
        entries,
        width,
        height,
        seed,
    })
}
