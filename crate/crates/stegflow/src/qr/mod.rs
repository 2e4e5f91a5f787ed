//! QR module matrices: encoding, rendering, parsing, scan simulation and
//! decode-accuracy metrics.
//!
//! Scope is deliberately narrow: byte mode, error-correction level H,
//! versions 5 through 8, mask pattern fixed to 0 so that encoding is a pure
//! function of `(message, version)`.

mod decode;
mod gf256;
mod metrics;
mod scan;

pub use decode::{decode_matrix, identify};
pub use metrics::{emr, tra};
pub use scan::{binarize, error_map, scan_simulate, scan_tensor, ErrorMap, ScanMap};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::img::{self, Image};
use ndarray::Array2;
use std::path::Path;

/// Kernel width used for scan simulation; one module renders to this many
/// pixels per side at native resolution.
pub const MODULE_PX: usize = 5;
/// Default binarization threshold for scan maps.
pub const BIN_THRESHOLD: f64 = 0.02;

pub(crate) struct VersionSpec {
    pub n: usize,
    pub total_codewords: usize,
    pub ecc_per_block: usize,
    pub num_blocks: usize,
    pub align: &'static [usize],
}

pub(crate) fn version_spec(version: u8) -> Result<&'static VersionSpec> {
    const V5: VersionSpec = VersionSpec {
        n: 37,
        total_codewords: 134,
        ecc_per_block: 22,
        num_blocks: 4,
        align: &[6, 30],
    };
    const V6: VersionSpec = VersionSpec {
        n: 41,
        total_codewords: 172,
        ecc_per_block: 28,
        num_blocks: 4,
        align: &[6, 34],
    };
    const V7: VersionSpec = VersionSpec {
        n: 45,
        total_codewords: 196,
        ecc_per_block: 26,
        num_blocks: 5,
        align: &[6, 22, 38],
    };
    const V8: VersionSpec = VersionSpec {
        n: 49,
        total_codewords: 242,
        ecc_per_block: 26,
        num_blocks: 6,
        align: &[6, 24, 42],
    };
    match version {
        5 => Ok(&V5),
        6 => Ok(&V6),
        7 => Ok(&V7),
        8 => Ok(&V8),
        v => Err(Error::UnsupportedVersion(v)),
    }
}

/// Modules per side for a supported version.
pub fn module_count(version: u8) -> Result<usize> {
    Ok(version_spec(version)?.n)
}

/// Maximum byte-mode payload at level H (mode + length header included).
pub fn capacity(version: u8) -> Result<usize> {
    let spec = version_spec(version)?;
    let data_codewords = spec.total_codewords - spec.num_blocks * spec.ecc_per_block;
    Ok(data_codewords - 2)
}

/// An n x n grid of QR modules: 0 = black (dark), 1 = white (light).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleMatrix {
    modules: Array2<u8>,
    version: u8,
}

impl ModuleMatrix {
    /// Wrap an existing 0/1 grid (e.g. a binarized scan) with version metadata.
    pub fn from_grid(modules: Array2<u8>, version: u8) -> Result<Self> {
        let n = module_count(version)?;
        if modules.dim() != (n, n) {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", modules.dim().0, modules.dim().1),
            });
        }
        Ok(ModuleMatrix { modules, version })
    }

    pub fn version(&self) -> u8 {
        self.version
    }

    pub fn side(&self) -> usize {
        self.modules.nrows()
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.modules
    }

    pub fn is_dark(&self, r: usize, c: usize) -> bool {
        self.modules[[r, c]] == 0
    }

    /// Plain text form: header line, then one row of 0/1 characters per line.
    pub fn to_text(&self) -> String {
        let n = self.side();
        let mut out = format!("QRv{} ECC-H n={}\n", self.version, n);
        for r in 0..n {
            for c in 0..n {
                out.push(if self.modules[[r, c]] == 0 { '0' } else { '1' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty module matrix text".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad = || Error::Format(format!("bad module matrix header: {header}"));
        if parts.len() != 3 || !parts[0].starts_with("QRv") || parts[1] != "ECC-H" {
            return Err(bad());
        }
        let version: u8 = parts[0][3..].parse().map_err(|_| bad())?;
        let n: usize = parts[2]
            .strip_prefix("n=")
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        if n != module_count(version)? {
            return Err(Error::Format(format!(
                "n={n} inconsistent with version {version}"
            )));
        }
        let mut modules = Array2::<u8>::zeros((n, n));
        for (r, line) in lines.take(n).enumerate() {
            if line.len() != n {
                return Err(Error::Format(format!("row {r} has length {}", line.len())));
            }
            for (c, ch) in line.chars().enumerate() {
                modules[[r, c]] = match ch {
                    '0' => 0,
                    '1' => 1,
                    _ => return Err(Error::Format(format!("bad cell {ch:?} at ({r},{c})"))),
                };
            }
        }
        ModuleMatrix::from_grid(modules, version)
    }

    /// PNG at native resolution (`MODULE_PX` pixels per module).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let native = self.side() * MODULE_PX;
        let image: Image<f32> = render(self, MODULE_PX, native)?;
        img::save(&image, path)
    }
}

/// True for finder/separator, timing, alignment, format, version and the
/// fixed dark module; false for data-carrying cells.
pub(crate) fn is_function_module(version: u8, r: usize, c: usize) -> bool {
    let spec = version_spec(version).expect("validated version");
    let n = spec.n;
    // Finder patterns with separators and format areas around them.
    if r < 9 && c < 9 {
        return true;
    }
    if r < 9 && c >= n - 8 {
        return true;
    }
    if r >= n - 8 && c < 9 {
        return true;
    }
    // Timing patterns.
    if r == 6 || c == 6 {
        return true;
    }
    // Version information blocks (versions 7+).
    if version >= 7 && ((r < 6 && c >= n - 11) || (c < 6 && r >= n - 11)) {
        return true;
    }
    // Alignment patterns, skipping the three finder corners.
    let first = spec.align[0];
    let last = *spec.align.last().unwrap();
    for &cy in spec.align {
        for &cx in spec.align {
            if (cy == first && cx == first)
                || (cy == first && cx == last)
                || (cy == last && cx == first)
            {
                continue;
            }
            if r + 2 >= cy && r <= cy + 2 && c + 2 >= cx && c <= cx + 2 {
                return true;
            }
        }
    }
    false
}

/// BCH(15,5)-protected format word for level H and the given mask.
pub(crate) fn format_word(mask: u8) -> u16 {
    let data = ((2u32) << 3) | mask as u32; // H encodes as 2
    let mut rem = data;
    for _ in 0..10 {
        rem = (rem << 1) ^ ((rem >> 9) * 0x537);
    }
    (((data << 10) | rem) ^ 0x5412) as u16
}

fn version_word(version: u8) -> u32 {
    let mut rem = version as u32;
    for _ in 0..12 {
        rem = (rem << 1) ^ ((rem >> 11) * 0x1F25);
    }
    ((version as u32) << 12) | rem
}

/// Build the interleaved codeword sequence (data + error correction).
fn build_codewords(message: &[u8], version: u8) -> Result<Vec<u8>> {
    let spec = version_spec(version)?;
    let cap = capacity(version)?;
    if message.len() > cap {
        return Err(Error::CapacityExceeded {
            got: message.len(),
            cap,
            version,
        });
    }
    let data_codewords = spec.total_codewords - spec.num_blocks * spec.ecc_per_block;

    // Bit stream: byte-mode header, payload, terminator, byte padding.
    let mut bits: Vec<bool> = Vec::with_capacity(data_codewords * 8);
    let push_bits = |bits: &mut Vec<bool>, value: u32, count: usize| {
        for i in (0..count).rev() {
            bits.push((value >> i) & 1 != 0);
        }
    };
    push_bits(&mut bits, 0b0100, 4);
    push_bits(&mut bits, message.len() as u32, 8);
    for &byte in message {
        push_bits(&mut bits, byte as u32, 8);
    }
    let limit = data_codewords * 8;
    let term = (limit - bits.len()).min(4);
    push_bits(&mut bits, 0, term);
    while bits.len() % 8 != 0 {
        bits.push(false);
    }
    let mut data: Vec<u8> = bits
        .chunks(8)
        .map(|ch| ch.iter().fold(0u8, |acc, &b| (acc << 1) | b as u8))
        .collect();
    let pads = [0xEC_u8, 0x11];
    let mut pad_ix = 0;
    while data.len() < data_codewords {
        data.push(pads[pad_ix]);
        pad_ix ^= 1;
    }

    // Split into blocks (short blocks first), append parity, interleave.
    let num_short = spec.num_blocks - spec.total_codewords % spec.num_blocks;
    let short_total = spec.total_codewords / spec.num_blocks;
    let short_data = short_total - spec.ecc_per_block;
    let mut blocks: Vec<(Vec<u8>, Vec<u8>)> = Vec::with_capacity(spec.num_blocks);
    let mut off = 0;
    for b in 0..spec.num_blocks {
        let len = if b < num_short {
            short_data
        } else {
            short_data + 1
        };
        let chunk = data[off..off + len].to_vec();
        off += len;
        let ecc = gf256::rs_encode(&chunk, spec.ecc_per_block);
        blocks.push((chunk, ecc));
    }
    let max_data = short_data + 1;
    let mut out = Vec::with_capacity(spec.total_codewords);
    for i in 0..max_data {
        for (d, _) in &blocks {
            if i < d.len() {
                out.push(d[i]);
            }
        }
    }
    for i in 0..spec.ecc_per_block {
        for (_, e) in &blocks {
            out.push(e[i]);
        }
    }
    debug_assert_eq!(out.len(), spec.total_codewords);
    Ok(out)
}

/// Encode a byte message into a module matrix (level H, mask pattern 0).
pub fn encode_message(message: &[u8], version: u8) -> Result<ModuleMatrix> {
    let spec = version_spec(version)?;
    let n = spec.n;
    let codewords = build_codewords(message, version)?;

    // 1 = white everywhere, then draw dark cells as 0.
    let mut grid = Array2::<u8>::from_elem((n, n), 1);
    let set_dark = |grid: &mut Array2<u8>, r: usize, c: usize, dark: bool| {
        grid[[r, c]] = if dark { 0 } else { 1 };
    };

    // Finder patterns and separators.
    for &(fr, fc) in &[(0usize, 0usize), (0, n - 7), (n - 7, 0)] {
        for dr in -1i32..8 {
            for dc in -1i32..8 {
                let r = fr as i32 + dr;
                let c = fc as i32 + dc;
                if r < 0 || c < 0 || r >= n as i32 || c >= n as i32 {
                    continue;
                }
                let dy = (dr - 3).abs();
                let dx = (dc - 3).abs();
                let dark = dy.max(dx) != 2 && dr >= 0 && dr < 7 && dc >= 0 && dc < 7;
                set_dark(&mut grid, r as usize, c as usize, dark);
            }
        }
    }
    // Timing patterns.
    for i in 8..n - 8 {
        set_dark(&mut grid, 6, i, i % 2 == 0);
        set_dark(&mut grid, i, 6, i % 2 == 0);
    }
    // Alignment patterns.
    let first = spec.align[0];
    let last = *spec.align.last().unwrap();
    for &cy in spec.align {
        for &cx in spec.align {
            if (cy == first && cx == first)
                || (cy == first && cx == last)
                || (cy == last && cx == first)
            {
                continue;
            }
            for dr in -2i32..=2 {
                for dc in -2i32..=2 {
                    let dark = dr.abs().max(dc.abs()) != 1;
                    set_dark(
                        &mut grid,
                        (cy as i32 + dr) as usize,
                        (cx as i32 + dc) as usize,
                        dark,
                    );
                }
            }
        }
    }
    // Format information, both copies, plus the fixed dark module.
    let fw = format_word(0);
    let fbit = |i: usize| (fw >> i) & 1 != 0;
    for i in 0..6 {
        set_dark(&mut grid, i, 8, fbit(i));
    }
    set_dark(&mut grid, 7, 8, fbit(6));
    set_dark(&mut grid, 8, 8, fbit(7));
    set_dark(&mut grid, 8, 7, fbit(8));
    for i in 9..15 {
        set_dark(&mut grid, 8, 14 - i, fbit(i));
    }
    for i in 0..8 {
        set_dark(&mut grid, 8, n - 1 - i, fbit(i));
    }
    for i in 8..15 {
        set_dark(&mut grid, n - 15 + i, 8, fbit(i));
    }
    set_dark(&mut grid, n - 8, 8, true);
    // Version information (versions 7+).
    if version >= 7 {
        let vw = version_word(version);
        for i in 0..18 {
            let bit = (vw >> i) & 1 != 0;
            let a = n - 11 + i % 3;
            let b = i / 3;
            set_dark(&mut grid, b, a, bit);
            set_dark(&mut grid, a, b, bit);
        }
    }

    // Zigzag placement of codeword bits, then mask pattern 0.
    let total_bits = codewords.len() * 8;
    let mut bit_ix = 0usize;
    let mut right = n as i32 - 1;
    while right >= 1 {
        if right == 6 {
            right = 5;
        }
        let upward = (right + 1) & 2 == 0;
        for vert in 0..n {
            for j in 0..2 {
                let c = (right - j as i32) as usize;
                let r = if upward { n - 1 - vert } else { vert };
                if is_function_module(version, r, c) {
                    continue;
                }
                let mut bit = if bit_ix < total_bits {
                    (codewords[bit_ix >> 3] >> (7 - (bit_ix & 7))) & 1 != 0
                } else {
                    false // remainder bits
                };
                bit_ix += 1;
                if (r + c) % 2 == 0 {
                    bit = !bit; // mask pattern 0
                }
                set_dark(&mut grid, r, c, bit);
            }
        }
        right -= 2;
    }

    ModuleMatrix::from_grid(grid, version)
}

/// Rasterize a matrix: black module = 0.0, white = 1.0, grayscale replicated
/// to 3 channels, drawn at `module_px` per module and nearest-resampled to
/// `out_size` per side.
pub fn render<T: Scalar>(mm: &ModuleMatrix, module_px: usize, out_size: usize) -> Result<Image<T>> {
    let n = mm.side();
    let native = n * module_px;
    if module_px < 1 || out_size < native {
        return Err(Error::ShapeMismatch {
            expected: format!(">= native {native}"),
            got: format!("out_size {out_size}"),
        });
    }
    let base: Image<T> = Image::from_shape_fn((3, native, native), |(_, y, x)| {
        T::from_f(mm.grid()[[y / module_px, x / module_px]] as f64)
    });
    Ok(if out_size == native {
        base
    } else {
        img::resize_nearest(&base, out_size, out_size)
    })
}

/// Exact inverse of [`render`] at native module alignment: each module is
/// read from its center pixel with a 0.5 threshold.
pub fn matrix_from_image<T: Scalar>(image: &Image<T>, version: u8) -> Result<ModuleMatrix> {
    let n = module_count(version)?;
    let (_, h, w) = image.dim();
    if h != w || h % n != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("square side divisible by {n}"),
            got: format!("{h}x{w}"),
        });
    }
    let px = h / n;
    let grid = Array2::from_shape_fn((n, n), |(r, c)| {
        let y = r * px + px / 2;
        let x = c * px + px / 2;
        let lum = (image[[0, y, x]] + image[[1, y, x]] + image[[2, y, x]]).to_f() / 3.0;
        u8::from(lum > 0.5)
    });
    ModuleMatrix::from_grid(grid, version)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_match_version_rule() {
        for (v, n) in [(5u8, 37usize), (6, 41), (7, 45), (8, 49)] {
            assert_eq!(module_count(v).unwrap(), n);
            assert_eq!(n, 37 + 4 * (v as usize - 5));
        }
        assert!(matches!(
            module_count(4),
            Err(Error::UnsupportedVersion(4))
        ));
        assert!(matches!(
            module_count(9),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn capacity_table() {
        assert_eq!(capacity(5).unwrap(), 44);
        assert_eq!(capacity(6).unwrap(), 58);
        assert_eq!(capacity(7).unwrap(), 64);
        assert_eq!(capacity(8).unwrap(), 84);
    }

    #[test]
    fn capacity_errors() {
        let msg = vec![b'a'; 45];
        assert!(matches!(
            encode_message(&msg, 5),
            Err(Error::CapacityExceeded { got: 45, cap: 44, version: 5 })
        ));
        assert!(encode_message(&vec![b'a'; 44], 5).is_ok());
    }

    #[test]
    fn empty_message_is_valid() {
        let mm = encode_message(b"", 5).unwrap();
        assert_eq!(mm.side(), 37);
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = encode_message(b"determinism", 6).unwrap();
        let b = encode_message(b"determinism", 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn text_roundtrip() {
        let mm = encode_message(b"text form", 5).unwrap();
        let text = mm.to_text();
        assert!(text.starts_with("QRv5 ECC-H n=37\n"));
        let back = ModuleMatrix::from_text(&text).unwrap();
        assert_eq!(mm, back);
    }

    #[test]
    fn render_parse_exact_at_native() {
        let mm = encode_message(b"native inverse", 5).unwrap();
        let image: Image<f32> = render(&mm, MODULE_PX, 37 * MODULE_PX).unwrap();
        let back = matrix_from_image(&image, 5).unwrap();
        assert_eq!(mm, back);
    }

    #[test]
    fn render_resizes_to_requested_side() {
        let mm = encode_message(b"resize", 5).unwrap();
        let image: Image<f32> = render(&mm, 5, 224).unwrap();
        assert_eq!(image.dim(), (3, 224, 224));
    }

    #[test]
    fn all_white_grid_renders_constant_one() {
        let grid = Array2::<u8>::from_elem((37, 37), 1);
        let mm = ModuleMatrix::from_grid(grid, 5).unwrap();
        let image: Image<f32> = render(&mm, 2, 74).unwrap();
        assert!(image.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn finder_patterns_in_corners() {
        let mm = encode_message(b"finders", 5).unwrap();
        // Center of each finder is dark; the separator ring is light.
        for &(r, c) in &[(3usize, 3usize), (3, 33), (33, 3)] {
            assert!(mm.is_dark(r, c));
        }
        assert!(!mm.is_dark(7, 7));
    }
}
