//! Matrix Market text and little-endian binary dumps.
//!
//! Binary layouts (all integers `u64` unless noted, all values `f64`):
//!
//! * `BNDM`: n, lower_bw, upper_bw, then the diagonals from `-lower_bw` to
//!   `upper_bw`, each as `n` values indexed by row.
//! * `TALF`: n, m, segment count, then per segment width, role (`u32`) and
//!   birth iteration, then the `n x m` data column-major.
//! * `KERN`: rows, cols, row block count, row blocks, column block count,
//!   column blocks, then the data column-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::banded::BandedMatrix;
use crate::error::{FsdaError, Result};
use crate::factor::{BlockKernel, Role, Segment, TallFactor};

fn parse_err(file: &str, location: String, msg: impl Into<String>) -> FsdaError {
    FsdaError::Parse {
        file: file.to_string(),
        location,
        msg: msg.into(),
    }
}

/// Reads a coordinate Matrix Market file into a banded matrix. Accepts `real`,
/// `integer` and `pattern` fields with `general` or `symmetric` symmetry.
pub fn parse_matrix_market(text: &str, origin: &str) -> Result<BandedMatrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(origin, "line 1".into(), "empty file"))?;
    let h: Vec<String> = header.split_whitespace().map(|s| s.to_ascii_lowercase()).collect();
    if h.len() != 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" || h[2] != "coordinate" {
        return Err(parse_err(origin, "line 1".into(), "expected `%%MatrixMarket matrix coordinate <field> <symmetry>`"));
    }
    let pattern = match h[3].as_str() {
        "real" | "integer" | "double" => false,
        "pattern" => true,
        f => return Err(parse_err(origin, "line 1".into(), format!("unsupported field `{f}`"))),
    };
    let symmetric = match h[4].as_str() {
        "general" => false,
        "symmetric" => true,
        s => return Err(parse_err(origin, "line 1".into(), format!("unsupported symmetry `{s}`"))),
    };
    let mut size = None;
    for (no, line) in lines.by_ref() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        let nums: Option<Vec<usize>> = f.iter().map(|x| x.parse().ok()).collect();
        match nums {
            Some(v) if v.len() == 3 => size = Some((no + 1, v[0], v[1], v[2])),
            _ => return Err(parse_err(origin, format!("line {}", no + 1), "expected `rows cols entries`")),
        }
        break;
    }
    let (size_line, rows, cols, nnz) =
        size.ok_or_else(|| parse_err(origin, "end of file".into(), "missing size line"))?;
    if rows != cols || rows == 0 {
        return Err(parse_err(origin, format!("line {size_line}"), format!("banded matrix must be square and nonempty, got {rows}x{cols}")));
    }
    let n = rows;
    let mut entries = Vec::with_capacity(nnz);
    for (no, line) in lines {
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        if entries.len() == nnz {
            return Err(parse_err(origin, format!("line {}", no + 1), "more entries than declared"));
        }
        let loc = || format!("line {}", no + 1);
        let f: Vec<&str> = t.split_whitespace().collect();
        let want = if pattern { 2 } else { 3 };
        if f.len() != want {
            return Err(parse_err(origin, loc(), format!("expected {want} fields, found {}", f.len())));
        }
        let i: usize = f[0].parse().map_err(|_| parse_err(origin, loc(), "bad row index"))?;
        let j: usize = f[1].parse().map_err(|_| parse_err(origin, loc(), "bad column index"))?;
        if i == 0 || j == 0 || i > n || j > n {
            return Err(parse_err(origin, loc(), format!("index ({i}, {j}) out of range")));
        }
        let v: f64 = if pattern {
            1.0
        } else {
            f[2].parse().map_err(|_| parse_err(origin, loc(), format!("bad value `{}`", f[2])))?
        };
        if symmetric && j > i {
            return Err(parse_err(origin, loc(), "symmetric file must list the lower triangle"));
        }
        entries.push((i - 1, j - 1, v));
    }
    if entries.len() < nnz {
        return Err(parse_err(
            origin,
            "end of file".into(),
            format!("truncated: {} of {nnz} entries present", entries.len()),
        ));
    }
    let (mut lower, mut upper) = (0, 0);
    for &(i, j, _) in &entries {
        if i > j {
            lower = lower.max(i - j);
            if symmetric {
                upper = upper.max(i - j);
            }
        } else {
            upper = upper.max(j - i);
        }
    }
    let mut m = BandedMatrix::with_bandwidths(n, lower, upper);
    for (i, j, v) in entries {
        m.set(i, j, v);
        if symmetric && i != j {
            m.set(j, i, v);
        }
    }
    Ok(m)
}

/// Writes every band slot (zeros included, so bandwidths survive a round trip).
/// Exactly symmetric matrices are stored as `symmetric`.
pub fn format_matrix_market(m: &BandedMatrix) -> String {
    let n = m.n();
    let symmetric = m.is_symmetric();
    let mut out = String::new();
    let kind = if symmetric { "symmetric" } else { "general" };
    out.push_str(&format!("%%MatrixMarket matrix coordinate real {kind}\n"));
    let mut body = String::new();
    let mut count = 0;
    for j in 0..n {
        let lo = if symmetric { j } else { j.saturating_sub(m.upper_bw()) };
        let hi = (j + m.lower_bw()).min(n - 1);
        for i in lo..=hi {
            body.push_str(&format!("{} {} {:e}\n", i + 1, j + 1, m.get(i, j)));
            count += 1;
        }
    }
    out.push_str(&format!("{n} {n} {count}\n"));
    out.push_str(&body);
    out
}

pub fn read_matrix_market(path: &Path) -> Result<BandedMatrix> {
    let text = fs::read_to_string(path)?;
    parse_matrix_market(&text, &path.display().to_string())
}

pub fn write_matrix_market(m: &BandedMatrix, path: &Path) -> Result<()> {
    fs::write(path, format_matrix_market(m))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.buf.len() {
            return Err(parse_err(
                self.origin,
                format!("offset {}", self.pos),
                format!("truncated: needed {len} more bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != m {
            return Err(parse_err(self.origin, "offset 0".into(), format!("bad magic, expected {}", String::from_utf8_lossy(m))));
        }
        Ok(())
    }
    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let b = self.take(count.checked_mul(8).ok_or_else(|| parse_err(self.origin, format!("offset {}", self.pos), "size overflow"))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(parse_err(self.origin, format!("offset {}", self.pos), "trailing bytes"));
        }
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vs: impl IntoIterator<Item = &'a f64>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_banded(m: &BandedMatrix) -> Vec<u8> {
    let mut out = b"BNDM".to_vec();
    put_u64(&mut out, m.n());
    put_u64(&mut out, m.lower_bw());
    put_u64(&mut out, m.upper_bw());
    for o in -(m.lower_bw() as isize)..=(m.upper_bw() as isize) {
        put_f64s(&mut out, m.diagonal(o));
    }
    out
}

pub fn decode_banded(buf: &[u8], origin: &str) -> Result<BandedMatrix> {
    let mut r = Reader { buf, pos: 0, origin };
    r.magic(b"BNDM")?;
    let n = r.u64()?;
    let lower = r.u64()?;
    let upper = r.u64()?;
    if n == 0 || lower >= n || upper >= n {
        return Err(parse_err(origin, "offset 4".into(), format!("invalid header n={n} lower={lower} upper={upper}")));
    }
    let mut diags = Vec::with_capacity(lower + upper + 1);
    for _ in 0..lower + upper + 1 {
        diags.push(r.f64s(n)?);
    }
    r.finish()?;
    BandedMatrix::from_diagonals(n, lower, upper, &diags)
}

pub fn encode_factor(f: &TallFactor) -> Vec<u8> {
    let mut out = b"TALF".to_vec();
    put_u64(&mut out, f.n());
    put_u64(&mut out, f.cols());
    put_u64(&mut out, f.segments().len());
    for s in f.segments() {
        put_u64(&mut out, s.width);
        out.extend_from_slice(&s.role.code().to_le_bytes());
        put_u64(&mut out, s.birth_k);
    }
    put_f64s(&mut out, f.data().as_slice());
    out
}

pub fn decode_factor(buf: &[u8], origin: &str) -> Result<TallFactor> {
    let mut r = Reader { buf, pos: 0, origin };
    r.magic(b"TALF")?;
    let n = r.u64()?;
    let m = r.u64()?;
    let count = r.u64()?;
    let mut segs = Vec::new();
    for _ in 0..count {
        let width = r.u64()?;
        let at = r.pos;
        let code = r.u32()?;
        let role = Role::from_code(code)
            .ok_or_else(|| parse_err(origin, format!("offset {at}"), format!("unknown role code {code}")))?;
        let birth = r.u64()?;
        segs.push(Segment::new(width, role, birth));
    }
    let data = r.f64s(n * m)?;
    r.finish()?;
    TallFactor::new(DMatrix::from_column_slice(n, m, &data), segs)
        .map_err(|e| parse_err(origin, "segment table".into(), e.to_string()))
}

pub fn encode_kernel(k: &BlockKernel) -> Vec<u8> {
    let mut out = b"KERN".to_vec();
    put_u64(&mut out, k.rows());
    put_u64(&mut out, k.cols());
    put_u64(&mut out, k.row_blocks().len());
    for &b in k.row_blocks() {
        put_u64(&mut out, b);
    }
    put_u64(&mut out, k.col_blocks().len());
    for &b in k.col_blocks() {
        put_u64(&mut out, b);
    }
    put_f64s(&mut out, k.data().as_slice());
    out
}

pub fn decode_kernel(buf: &[u8], origin: &str) -> Result<BlockKernel> {
    let mut r = Reader { buf, pos: 0, origin };
    r.magic(b"KERN")?;
    let rows = r.u64()?;
    let cols = r.u64()?;
    let nr = r.u64()?;
    let rb = (0..nr).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let nc = r.u64()?;
    let cb = (0..nc).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let data = r.f64s(rows * cols)?;
    r.finish()?;
    BlockKernel::new(DMatrix::from_column_slice(rows, cols, &data), rb, cb)
        .map_err(|e| parse_err(origin, "block table".into(), e.to_string()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_factor(f: &TallFactor, path: &Path) -> Result<()> {
    write_bytes(path, &encode_factor(f))
}

pub fn read_factor(path: &Path) -> Result<TallFactor> {
    decode_factor(&fs::read(path)?, &path.display().to_string())
}

pub fn write_kernel(k: &BlockKernel, path: &Path) -> Result<()> {
    write_bytes(path, &encode_kernel(k))
}

pub fn read_kernel(path: &Path) -> Result<BlockKernel> {
    decode_kernel(&fs::read(path)?, &path.display().to_string())
}

pub fn write_banded(m: &BandedMatrix, path: &Path) -> Result<()> {
    write_bytes(path, &encode_banded(m))
}

pub fn read_banded(path: &Path) -> Result<BandedMatrix> {
    decode_banded(&fs::read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BandedMatrix {
        let d = DMatrix::from_fn(6, 6, |i, j| {
            if i.abs_diff(j) <= 1 || j == i + 2 {
                (i * 6 + j) as f64 / 7.0 - 1.3
            } else {
                0.0
            }
        });
        BandedMatrix::from_dense(&d)
    }

    #[test]
    fn matrix_market_round_trip() {
        let m = sample();
        let back = parse_matrix_market(&format_matrix_market(&m), "mem").unwrap();
        assert_eq!(back, m);
        let s = m.add(&m.transpose()).unwrap();
        let text = format_matrix_market(&s);
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real symmetric"));
        assert_eq!(parse_matrix_market(&text, "mem").unwrap(), s);
    }

    #[test]
    fn matrix_market_pattern_and_errors() {
        let text = "%%MatrixMarket matrix coordinate pattern general\n% c\n3 3 2\n1 1\n3 2\n";
        let m = parse_matrix_market(text, "p").unwrap();
        assert_eq!(m.get(2, 1), 1.0);
        assert_eq!(m.lower_bw(), 1);
        let truncated = "%%MatrixMarket matrix coordinate real general\n3 3 2\n1 1 2.0\n";
        match parse_matrix_market(truncated, "t") {
            Err(FsdaError::Parse { location, .. }) => assert_eq!(location, "end of file"),
            other => panic!("{other:?}"),
        }
        let bad = "%%MatrixMarket matrix coordinate real general\n3 3 1\n1 x 2.0\n";
        match parse_matrix_market(bad, "b") {
            Err(FsdaError::Parse { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn binary_round_trips() {
        let m = sample();
        assert_eq!(decode_banded(&encode_banded(&m), "m").unwrap(), m);
        let f = TallFactor::new(
            DMatrix::from_fn(5, 3, |i, j| (i as f64).sin() + j as f64),
            vec![Segment::new(1, Role::G1, 2), Segment::new(2, Role::G2, 3)],
        )
        .unwrap();
        assert_eq!(decode_factor(&encode_factor(&f), "f").unwrap(), f);
        let k = BlockKernel::new(DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64), vec![1, 2], vec![2]).unwrap();
        assert_eq!(decode_kernel(&encode_kernel(&k), "k").unwrap(), k);
    }

    #[test]
    fn truncated_binary_is_reported() {
        let bytes = encode_banded(&sample());
        match decode_banded(&bytes[..bytes.len() - 3], "cut") {
            Err(FsdaError::Parse { msg, .. }) => assert!(msg.contains("truncated")),
            other => panic!("{other:?}"),
        }
        assert!(decode_factor(b"NOPE", "x").is_err());
    }
}
