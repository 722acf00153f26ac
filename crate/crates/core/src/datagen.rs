//! Mixed-mode bouncing-sprite sequences and the `MSEQ` dataset file.
//!
//! A sequence of mode `k` shows `k` sprites flying with elastic wall
//! reflection and composited by per-pixel max. Sprites are fixed 12×12 binary
//! digit-like glyphs, resampled nearest-neighbour to `sprite_size`.
//!
//! File layout (little-endian):
//!
//! ```text
//! "MSEQ" | version u32 | count u32 | T u16 | H u16 | W u16 | channels u8
//! then per sequence: mode_label u8 | T·H·W·channels u8 pixels, row-major [T][H][W][C]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSEQ";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 19;
pub const GLYPH_SIZE: usize = 12;

const GLYPHS_6X6: [[&str; 6]; 10] = [
    [" #### ", "#    #", "#    #", "#    #", "#    #", " #### "],
    ["  ##  ", " ###  ", "  ##  ", "  ##  ", "  ##  ", " #### "],
    [" #### ", "#    #", "    # ", "  ##  ", " #    ", "######"],
    ["##### ", "     #", "  ### ", "     #", "     #", "##### "],
    ["#   # ", "#   # ", "######", "    # ", "    # ", "    # "],
    ["######", "#     ", "##### ", "     #", "     #", "##### "],
    [" #### ", "#     ", "##### ", "#    #", "#    #", " #### "],
    ["######", "     #", "    # ", "   #  ", "  #   ", "  #   "],
    [" #### ", "#    #", " #### ", "#    #", "#    #", " #### "],
    [" #### ", "#    #", " #####", "     #", "    # ", " ###  "],
];

pub fn glyph_count() -> usize {
    GLYPHS_6X6.len()
}

/// The 12×12 binary pattern of glyph `index`.
pub fn glyph(index: usize) -> [[bool; GLYPH_SIZE]; GLYPH_SIZE] {
    let rows = GLYPHS_6X6[index % GLYPHS_6X6.len()];
    let mut g = [[false; GLYPH_SIZE]; GLYPH_SIZE];
    for (i, row) in g.iter_mut().enumerate() {
        let src = rows[i / 2].as_bytes();
        for (j, px) in row.iter_mut().enumerate() {
            *px = src[j / 2] == b'#';
        }
    }
    g
}

/// SplitMix64 finaliser over `(base, index)`; used for per-item seed streams.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSequenceSpec {
    pub frame_size: usize,
    pub seq_len: usize,
    /// Sprite counts, one per mode.
    pub modes: Vec<u8>,
    /// Mixture proportions aligned with `modes`.
    pub mode_weights: Vec<f64>,
    pub sprite_size: usize,
    pub speed_range: (f64, f64),
    pub seed: u64,
}

impl Default for SpriteSequenceSpec {
    fn default() -> Self {
        Self {
            frame_size: 64,
            seq_len: 20,
            modes: vec![1, 2, 3],
            mode_weights: vec![1.0 / 3.0; 3],
            sprite_size: 12,
            speed_range: (2.0, 4.0),
            seed: 0,
        }
    }
}

impl SpriteSequenceSpec {
    /// Desk-scale 16×16 variant used by tests and the ablation runs.
    pub fn small(seed: u64) -> Self {
        Self {
            frame_size: 16,
            sprite_size: 6,
            speed_range: (0.5, 1.5),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.frame_size > u16::MAX as usize {
            return Err(Error::config("frame_size", "must be in 1..=65535"));
        }
        if self.seq_len == 0 || self.seq_len > u16::MAX as usize {
            return Err(Error::config("seq_len", "must be in 1..=65535"));
        }
        if self.sprite_size == 0 || self.sprite_size >= self.frame_size {
            return Err(Error::config(
                "sprite_size",
                "must be positive and smaller than frame_size",
            ));
        }
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config(
                "speed_min",
                "speeds must be positive with min <= max",
            ));
        }
        if self.modes.is_empty() || self.modes.iter().any(|&m| m == 0) {
            return Err(Error::config(
                "modes",
                "need at least one positive sprite count",
            ));
        }
        if self.mode_weights.len() != self.modes.len() {
            return Err(Error::config(
                "mode_weights",
                "must have one weight per mode",
            ));
        }
        let total: f64 = self.mode_weights.iter().sum();
        if self.mode_weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::config(
                "mode_weights",
                "weights must be nonnegative and sum to 1",
            ));
        }
        Ok(())
    }

    fn bound(&self) -> f64 {
        (self.frame_size - self.sprite_size) as f64
    }
}

fn reflect_axis(mut p: f64, mut v: f64, bound: f64) -> (f64, f64) {
    p += v;
    loop {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > bound {
            p = 2.0 * bound - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// Advance one step with elastic reflection inside `[0, bounds.0] × [0, bounds.1]`.
pub fn step_sprite(
    pos: (f64, f64),
    vel: (f64, f64),
    bounds: (f64, f64),
) -> ((f64, f64), (f64, f64)) {
    let (x, vx) = reflect_axis(pos.0, vel.0, bounds.0);
    let (y, vy) = reflect_axis(pos.1, vel.1, bounds.1);
    ((x, y), (vx, vy))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub label: u8,
    /// `[T][H][W][C]` pixels.
    pub frames: Vec<u8>,
}

#[derive(Clone, Copy, Debug)]
struct Sprite {
    glyph: usize,
    pos: (f64, f64),
    vel: (f64, f64),
}

fn render(spec: &SpriteSequenceSpec, sprites: &[Sprite], out: &mut [u8]) {
    let f = spec.frame_size;
    let s = spec.sprite_size;
    for sp in sprites {
        let g = glyph(sp.glyph);
        let top = sp.pos.1.round() as usize;
        let left = sp.pos.0.round() as usize;
        for u in 0..s {
            for v in 0..s {
                if g[u * GLYPH_SIZE / s][v * GLYPH_SIZE / s] {
                    let (r, c) = (top + u, left + v);
                    if r < f && c < f {
                        out[r * f + c] = 255;
                    }
                }
            }
        }
    }
}

/// Render a sequence with `mode` sprites. `velocity` overrides every sprite's
/// sampled velocity when given.
pub fn generate_sequence_with<R: Rng + ?Sized>(
    spec: &SpriteSequenceSpec,
    mode: u8,
    rng: &mut R,
    velocity: Option<(f64, f64)>,
) -> Result<Sequence> {
    spec.validate()?;
    if !spec.modes.contains(&mode) {
        return Err(Error::contract(format!(
            "mode {mode} not in {:?}",
            spec.modes
        )));
    }
    let bound = spec.bound();
    let mut sprites: Vec<Sprite> = (0..mode)
        .map(|_| {
            let glyph = rng.gen_range(0..glyph_count());
            let pos = (rng.gen_range(0.0..=bound), rng.gen_range(0.0..=bound));
            let speed = rng.gen_range(spec.speed_range.0..=spec.speed_range.1);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let vel = velocity.unwrap_or((speed * angle.cos(), speed * angle.sin()));
            Sprite { glyph, pos, vel }
        })
        .collect();
    let frame = spec.frame_size * spec.frame_size;
    let mut frames = vec![0u8; spec.seq_len * frame];
    for t in 0..spec.seq_len {
        render(spec, &sprites, &mut frames[t * frame..(t + 1) * frame]);
        for sp in &mut sprites {
            (sp.pos, sp.vel) = step_sprite(sp.pos, sp.vel, (bound, bound));
        }
    }
    Ok(Sequence {
        label: mode,
        frames,
    })
}

pub fn generate_sequence<R: Rng + ?Sized>(
    spec: &SpriteSequenceSpec,
    mode: u8,
    rng: &mut R,
) -> Result<Sequence> {
    generate_sequence_with(spec, mode, rng, None)
}

fn sample_mode<R: Rng + ?Sized>(spec: &SpriteSequenceSpec, rng: &mut R) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (&m, &w) in spec.modes.iter().zip(&spec.mode_weights) {
        acc += w;
        if u < acc {
            return m;
        }
    }
    *spec.modes.last().expect("validated non-empty")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sequences: Vec<Sequence>,
}

/// Sequence `i` uses its own stream seeded from `(spec.seed, i)`, so the
/// result is independent of how generation is scheduled.
pub fn generate_dataset(spec: &SpriteSequenceSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let sequences = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
            let mode = sample_mode(spec, &mut rng);
            generate_sequence(spec, mode, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seq_len: spec.seq_len,
        height: spec.frame_size,
        width: spec.frame_size,
        channels: 1,
        sequences,
    })
}

/// Frames as `[B, T, C, H, W]` scaled to `[0, 1]`, plus mode labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub frames: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn labels(&self) -> Vec<u8> {
        self.sequences.iter().map(|s| s.label).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<SequenceBatch> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let (t, c, h, w) = (self.seq_len, self.channels, self.height, self.width);
        let mut data = vec![0.0; indices.len() * t * c * h * w];
        let mut labels = Vec::with_capacity(indices.len());
        for (bi, &i) in indices.iter().enumerate() {
            let seq = self
                .sequences
                .get(i)
                .ok_or_else(|| Error::contract(format!("sequence index {i} out of range")))?;
            labels.push(seq.label);
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        for ci in 0..c {
                            let src = ((ti * h + y) * w + x) * c + ci;
                            let dst = ((((bi * t + ti) * c + ci) * h) + y) * w + x;
                            data[dst] = seq.frames[src] as f64 / 255.0;
                        }
                    }
                }
            }
        }
        Ok(SequenceBatch {
            frames: Tensor::new(&[indices.len(), t, c, h, w], data)?,
            labels,
        })
    }

    /// Sequences whose label is `mode`, in file order.
    pub fn filter_mode(&self, mode: u8) -> Dataset {
        Dataset {
            sequences: self
                .sequences
                .iter()
                .filter(|s| s.label == mode)
                .cloned()
                .collect(),
            ..self.clone_header()
        }
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            sequences: self.sequences[range].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            seq_len: self.seq_len,
            height: self.height,
            width: self.width,
            channels: self.channels,
            sequences: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.len() * (1 + self.seq_len * self.frame_len()));
        self.write_to(&mut out)
            .map_err(|e| Error::io("<memory>", e))?;
        Ok(out)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidInput, m.to_string());
        let to_u16 = |v: usize| u16::try_from(v).map_err(|_| bad("dimension exceeds u16"));
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.len()).map_err(|_| bad("too many sequences"))?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&to_u16(self.seq_len)?.to_le_bytes())?;
        w.write_all(&to_u16(self.height)?.to_le_bytes())?;
        w.write_all(&to_u16(self.width)?.to_le_bytes())?;
        w.write_all(&[u8::try_from(self.channels).map_err(|_| bad("too many channels"))?])?;
        let expected = self.seq_len * self.frame_len();
        for s in &self.sequences {
            if s.frames.len() != expected {
                return Err(bad("sequence length does not match header"));
            }
            w.write_all(&[s.label])?;
            w.write_all(&s.frames)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut reader = DatasetReader::new(bytes)?;
        let mut sequences = Vec::with_capacity(reader.remaining());
        for s in &mut reader {
            sequences.push(s?);
        }
        let h = reader.header();
        let trailing = bytes.len() as u64 - reader.offset();
        if trailing != 0 {
            return Err(Error::Format {
                offset: reader.offset(),
                msg: format!("{trailing} trailing bytes after last sequence"),
            });
        }
        Ok(Dataset {
            seq_len: h.seq_len,
            height: h.height,
            width: h.width,
            channels: h.channels,
            sequences,
        })
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetHeader {
    pub count: usize,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Streaming reader over an `MSEQ` byte source.
pub struct DatasetReader<R: Read> {
    src: R,
    header: DatasetHeader,
    offset: u64,
    read: usize,
    failed: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(f))
    }
}

/// Fill `buf` completely, returning how many bytes were available.
fn read_full<R: Read>(src: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match src.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<dataset stream>", e)),
        }
    }
    Ok(got)
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut src: R) -> Result<Self> {
        let mut h = [0u8; HEADER_LEN];
        let got = read_full(&mut src, &mut h)?;
        if got >= 4 && &h[..4] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected MSEQ".into(),
            });
        }
        if got < HEADER_LEN {
            return Err(Error::Format {
                offset: got as u64,
                msg: format!("truncated header ({got} of {HEADER_LEN} bytes)"),
            });
        }
        let version = u32::from_le_bytes(h[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes([h[o], h[o + 1]]) as usize;
        let header = DatasetHeader {
            count: u32::from_le_bytes(h[8..12].try_into().expect("4 bytes")) as usize,
            seq_len: u16_at(12),
            height: u16_at(14),
            width: u16_at(16),
            channels: h[18] as usize,
        };
        if header.seq_len == 0 || header.height == 0 || header.width == 0 || header.channels == 0 {
            return Err(Error::Format {
                offset: 12,
                msg: "zero dimension in header".into(),
            });
        }
        Ok(Self {
            src,
            header,
            offset: HEADER_LEN as u64,
            read: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> DatasetHeader {
        self.header
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn remaining(&self) -> usize {
        self.header.count - self.read
    }

    fn next_sequence(&mut self) -> Result<Sequence> {
        let h = &self.header;
        let len = 1 + h.seq_len * h.height * h.width * h.channels;
        let mut buf = vec![0u8; len];
        let got = read_full(&mut self.src, &mut buf)?;
        if got < len {
            return Err(Error::Format {
                offset: self.offset + got as u64,
                msg: format!(
                    "truncated sequence {} of {} ({got} of {len} bytes)",
                    self.read, h.count
                ),
            });
        }
        self.offset += len as u64;
        self.read += 1;
        let label = buf[0];
        buf.remove(0);
        Ok(Sequence { label, frames: buf })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<Sequence>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.read >= self.header.count {
            return None;
        }
        let r = self.next_sequence();
        self.failed = r.is_err();
        Some(r)
    }
}
