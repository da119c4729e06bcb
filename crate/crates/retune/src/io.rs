//! File formats: binary PPM/PGM images for visualization, a lossless
//! little-endian raw-float container for round-tripping arrays, and plain
//! CSV with a header row, '.' decimals and '\n' line ends.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::core::{Shape, Signal};
use crate::error::{Error, Result};

/// Magic bytes of the raw-float container.
pub const RAW_MAGIC: &[u8; 4] = b"RTNF";

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255). Channel-major planes are interleaved into
/// per-pixel RGB triples on disk.
pub fn write_ppm(path: &Path, x: &Signal) -> Result<()> {
    if x.shape.channels != 3 {
        return Err(Error::ShapeMismatch("PPM wants 3 channels".into()));
    }
    let (h, w) = (x.shape.height, x.shape.width);
    let mut buf = Vec::with_capacity(32 + 3 * h * w);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            buf.push(quantize(x.data[c * plane + p]));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Binary PGM (P5, maxval 255) for single-channel signals.
pub fn write_pgm(path: &Path, x: &Signal) -> Result<()> {
    if x.shape.channels != 1 {
        return Err(Error::ShapeMismatch("PGM wants 1 channel".into()));
    }
    let (h, w) = (x.shape.height, x.shape.width);
    let mut buf = Vec::with_capacity(32 + h * w);
    buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    buf.extend(x.data.iter().map(|&v| quantize(v)));
    fs::write(path, buf)?;
    Ok(())
}

fn read_netpbm_header(data: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < data.len() {
        while pos < data.len() && (data[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !(data[pos] as char).is_whitespace() {
            pos += 1;
        }
        tokens.push(std::str::from_utf8(&data[start..pos]).map_err(|_| {
            Error::Format("non-ascii header".into())
        })?);
    }
    if tokens.len() < 4 || tokens[0] != magic {
        return Err(Error::Format(format!("expected {magic} header")));
    }
    let w: usize = tokens[1].parse().map_err(|_| Error::Format("bad width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| Error::Format("bad height".into()))?;
    let maxval: usize = tokens[3].parse().map_err(|_| Error::Format("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    // One whitespace byte separates the header from the raster.
    Ok((w, h, pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<Signal> {
    let data = fs::read(path)?;
    let (w, h, offset) = read_netpbm_header(&data, "P6")?;
    let plane = w * h;
    if data.len() < offset + 3 * plane {
        return Err(Error::Format("truncated raster".into()));
    }
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = data[offset + 3 * p + c] as f64 / 255.0;
        }
    }
    Signal::new(out, Shape::new(h, w, 3))
}

pub fn read_pgm(path: &Path) -> Result<Signal> {
    let data = fs::read(path)?;
    let (w, h, offset) = read_netpbm_header(&data, "P5")?;
    let plane = w * h;
    if data.len() < offset + plane {
        return Err(Error::Format("truncated raster".into()));
    }
    let out = data[offset..offset + plane].iter().map(|&b| b as f64 / 255.0).collect();
    Signal::new(out, Shape::new(h, w, 1))
}

/// Raw-float container: magic "RTNF", u32 little-endian rank, u32 dims,
/// then 64-bit little-endian IEEE floats.
pub fn write_raw(path: &Path, dims: &[u32], data: &[f64]) -> Result<()> {
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    if expected != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "dims product {expected} vs data length {}",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 8 * data.len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut file = fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != RAW_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let rank = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() < 8 + 4 * rank {
        return Err(Error::Format("truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()));
    }
    let n: usize = dims.iter().map(|&d| d as usize).product();
    let start = 8 + 4 * rank;
    if buf.len() != start + 8 * n {
        return Err(Error::Format(format!(
            "payload length {} does not match dims",
            buf.len() - start
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(f64::from_le_bytes(
            buf[start + 8 * i..start + 8 * (i + 1)].try_into().unwrap(),
        ));
    }
    Ok((dims, data))
}

/// CSV with a header row; fields joined by ',', rows by '\n', one trailing
/// newline. Callers format fields (floats through Display for shortest
/// round-trip text, reproducible across runs).
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    let mut line = header.join(",");
    line.push('\n');
    file.write_all(line.as_bytes())?;
    for row in rows {
        let mut line = row.join(",");
        line.push('\n');
        file.write_all(line.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn tmpdir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("retune-io-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn raw_round_trip_is_bitwise() {
        let dir = tmpdir("raw");
        let path = dir.join("a.rtnf");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-10.0..10.0)).collect();
        write_raw(&path, &[2, 3, 4], &data).unwrap();
        let (dims, back) = read_raw(&path).unwrap();
        assert_eq!(dims, vec![2, 3, 4]);
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn raw_rejects_bad_magic_and_dims() {
        let dir = tmpdir("rawbad");
        let path = dir.join("bad.rtnf");
        fs::write(&path, b"RTNX\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(read_raw(&path).is_err());
        assert!(write_raw(&dir.join("c.rtnf"), &[2, 2], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn ppm_quantization_error_within_one_level() {
        let dir = tmpdir("ppm");
        let path = dir.join("img.ppm");
        let shape = Shape::new(4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Signal::new(
            (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
            shape,
        )
        .unwrap();
        write_ppm(&path, &x).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape, shape);
        for (a, b) in x.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tmpdir("pgm");
        let path = dir.join("img.pgm");
        let shape = Shape::new(3, 5, 1);
        let x = Signal::new((0..15).map(|i| i as f64 / 15.0).collect(), shape).unwrap();
        write_pgm(&path, &x).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in x.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn csv_layout_is_exact() {
        let dir = tmpdir("csv");
        let path = dir.join("t.csv");
        write_csv(
            &path,
            &["a", "b"],
            &[vec!["1".into(), "2.5".into()], vec!["0.1".into(), "x".into()]],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "a,b\n1,2.5\n0.1,x\n");
    }
}
