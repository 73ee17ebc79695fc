use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::wire::PROTOCOL_VERSION;
use crate::media;

pub type RemoteFn = Arc<dyn Fn(&[u8]) -> Result<Vec<u8>, String> + Send + Sync>;

/// Named bytes-to-bytes functions callable in-process or inside a worker process.
///
/// Parent and workers must hold identical registries; the [`digest`](Self::digest)
/// over the protocol version and the sorted names is compared at handshake.
#[derive(Clone, Default)]
pub struct RemoteFunctionRegistry {
    fns: BTreeMap<String, RemoteFn>,
}

impl RemoteFunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: impl Into<String>, f: F) -> &mut Self
    where
        F: Fn(&[u8]) -> Result<Vec<u8>, String> + Send + Sync + 'static,
    {
        self.fns.insert(name.into(), Arc::new(f));
        self
    }

    pub fn get(&self, name: &str) -> Option<&RemoteFn> {
        self.fns.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.keys().map(String::as_str)
    }

    /// Runs `name` in the calling process.
    pub fn call(&self, name: &str, args: &[u8]) -> Result<Vec<u8>, String> {
        match self.get(name) {
            Some(f) => f(args),
            None => Err(unknown_function(name)),
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(PROTOCOL_VERSION.to_le_bytes());
        for name in self.fns.keys() {
            h.update(name.as_bytes());
            h.update([0]);
        }
        h.finalize().into()
    }

    /// The registry the bundled worker binaries serve.
    ///
    /// `crash` and `hang` exist for fault-injection and must only be invoked in a
    /// worker process.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        r.register("identity", |b| Ok(b.to_vec()))
            .register("reverse", |b| Ok(b.iter().rev().copied().collect()))
            .register("checksum", |b| Ok(Sha256::digest(b).to_vec()))
            .register("decode_resize", decode_resize)
            .register("sleep_ms", |b| {
                let ms = u64::from_le_bytes(
                    b.get(..8)
                        .and_then(|s| s.try_into().ok())
                        .ok_or("sleep_ms expects a u64 LE argument")?,
                );
                std::thread::sleep(Duration::from_millis(ms));
                Ok(b.to_vec())
            })
            .register("fail", |_| Err("injected failure".to_string()))
            .register("crash", |_| std::process::exit(70))
            .register("hang", |_| loop {
                std::thread::sleep(Duration::from_secs(3600));
            });
        r
    }
}

pub(crate) fn unknown_function(name: &str) -> String {
    format!("unknown function '{name}'")
}

/// Argument layout of the builtin `decode_resize`:
/// `out_w: u32 LE | out_h: u32 LE | burn_passes: u32 LE | PPM bytes`.
/// Returns the resized frame's raw RGB samples.
pub fn decode_resize_args(out_w: u32, out_h: u32, burn: u32, ppm: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + ppm.len());
    out.extend_from_slice(&out_w.to_le_bytes());
    out.extend_from_slice(&out_h.to_le_bytes());
    out.extend_from_slice(&burn.to_le_bytes());
    out.extend_from_slice(ppm);
    out
}

fn decode_resize(args: &[u8]) -> Result<Vec<u8>, String> {
    if args.len() < 12 {
        return Err("decode_resize expects a 12-byte header".to_string());
    }
    let word = |i: usize| u32::from_le_bytes(args[i * 4..i * 4 + 4].try_into().unwrap());
    let frame = media::decode_ppm_with_burn(&args[12..], word(2)).map_err(|e| e.to_string())?;
    let resized = media::resize_area(&frame, word(0), word(1)).map_err(|e| e.to_string())?;
    Ok(resized.into_pixels())
}

impl fmt::Debug for RemoteFunctionRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.fns.keys()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_names_only() {
        let mut a = RemoteFunctionRegistry::new();
        a.register("x", |b| Ok(b.to_vec()));
        let mut b = RemoteFunctionRegistry::new();
        b.register("x", |_| Ok(vec![]));
        assert_eq!(a.digest(), b.digest());
        b.register("y", |_| Ok(vec![]));
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn unknown_name_is_reported() {
        let r = RemoteFunctionRegistry::builtin();
        assert_eq!(
            r.call("nope", b""),
            Err("unknown function 'nope'".to_string())
        );
        assert_eq!(
            r.call("identity", &[0xde, 0xad, 0xbe, 0xef]).unwrap(),
            vec![0xde, 0xad, 0xbe, 0xef]
        );
    }

    #[test]
    fn decode_resize_matches_direct_path() {
        let frame = media::ImageFrame::from_fn(8, 6, |x, y, c| (x * 20 + y * 7 + c * 3) as u8);
        let ppm = media::encode_ppm(&frame);
        let out = RemoteFunctionRegistry::builtin()
            .call("decode_resize", &decode_resize_args(4, 3, 0, &ppm))
            .unwrap();
        assert_eq!(out, media::resize_area(&frame, 4, 3).unwrap().into_pixels());
    }
}
