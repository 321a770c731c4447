//! Reading and writing feature maps in the numpy `.npy` format.
//!
//! The writer emits version 1.0 files with a `<f4` C-order `(H, W, D)` array
//! and produces the same header bytes as `numpy.save`, including the spare
//! space numpy reserves for growing the leading axis. The reader accepts
//! versions 1.0 through 3.0, little-endian `f4`/`f8` data, C order only.
//!
//! See <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ARRAY_ALIGN: usize = 64;
const GROWTH_AXIS_MAX_DIGITS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset of the payload from the start of the file.
    pub data_offset: usize,
}

/// Options for [`read_map_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadOptions {
    /// Accept flat `(N, D)` arrays and reshape them to `(side, side, D)`.
    /// Requires `N == side * side`.
    pub flat_side: Option<usize>,
}

pub fn read_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    read_map_with(path, ReadOptions::default())
}

pub fn read_map_with(path: impl AsRef<Path>, opts: ReadOptions) -> Result<FeatureMap> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    decode_map(&mut reader, opts).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Reads only the header of an `.npy` file.
pub fn read_header(path: impl AsRef<Path>) -> Result<NpyHeader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_header(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Resolves a header's shape to `(height, width, channels)`.
pub fn map_dims(header: &NpyHeader, opts: ReadOptions) -> Result<[usize; 3]> {
    match (header.shape.as_slice(), opts.flat_side) {
        (&[h, w, d], _) => Ok([h, w, d]),
        (&[n, d], Some(side)) if side.checked_mul(side) == Some(n) => Ok([side, side, d]),
        (&[n, _], Some(side)) => Err(Error::BadHeader(format!(
            "flat array has {n} tokens, not {side}x{side}"
        ))),
        (shape, _) => Err(Error::ShapeRank(shape.to_vec())),
    }
}

pub fn decode_map(reader: &mut impl Read, opts: ReadOptions) -> Result<FeatureMap> {
    let header = parse_header(reader)?;
    let [h, w, d] = map_dims(&header, opts)?;
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(d))
        .ok_or_else(|| Error::BadHeader("shape overflows".into()))?;
    let expected = count * header.dtype.size();
    let mut bytes = Vec::with_capacity(expected);
    reader
        .take(expected as u64)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<npy payload>", e))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let values = match header.dtype {
        Dtype::F4 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        // `as` rounds to nearest, ties to even
        Dtype::F8 => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as f32)
            .collect(),
    };
    FeatureMap::new(h, w, d, values)
}

pub fn parse_header(reader: &mut impl Read) -> Result<NpyHeader> {
    let io_err = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::BadHeader("file ends inside header".into())
        } else {
            Error::io("<npy header>", e)
        }
    };
    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::BadMagic,
        _ => Error::io("<npy header>", e),
    })?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version).map_err(io_err)?;
    let (len_bytes, prefix) = match (version[0], version[1]) {
        (1, 0) => (2, 10),
        (2, 0) | (3, 0) => (4, 12),
        (major, minor) => return Err(Error::UnsupportedVersion { major, minor }),
    };
    let mut len_buf = [0u8; 4];
    reader.read_exact(&mut len_buf[..len_bytes]).map_err(io_err)?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    let mut text = vec![0u8; header_len];
    reader.read_exact(&mut text).map_err(io_err)?;
    let text = String::from_utf8(text).map_err(|_| Error::BadHeader("header is not text".into()))?;
    let dict = HeaderDict::parse(&text)?;
    if dict.fortran_order {
        return Err(Error::FortranOrder);
    }
    let dtype = match dict.descr.as_str() {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    Ok(NpyHeader {
        dtype,
        shape: dict.shape,
        data_offset: prefix + header_len,
    })
}

struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

/// Parser for the python dict literal numpy writes, e.g.
/// `{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }`.
struct LiteralParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> LiteralParser<'a> {
    fn err(&self, what: &str) -> Error {
        Error::BadHeader(format!("{what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, byte: u8) -> Result<()> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", byte as char)))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("expected integer"))
    }

    fn value(&mut self) -> Result<Literal> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(Literal::Str),
            Some(b'(') => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    if self.peek() == Some(b')') {
                        self.pos += 1;
                        break;
                    }
                    items.push(self.integer()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected `,` or `)`")),
                    }
                }
                Ok(Literal::Tuple(items))
            }
            _ => {
                let rest = &self.src[self.pos..];
                for (word, v) in [(&b"True"[..], true), (&b"False"[..], false)] {
                    if rest.starts_with(word) {
                        self.pos += word.len();
                        return Ok(Literal::Bool(v));
                    }
                }
                Err(self.err("unsupported literal"))
            }
        }
    }
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let mut p = LiteralParser {
            src: text.as_bytes(),
            pos: 0,
        };
        let (mut descr, mut fortran_order, mut shape) = (None, None, None);
        p.expect(b'{')?;
        loop {
            if p.peek() == Some(b'}') {
                p.pos += 1;
                break;
            }
            let key = p.string()?;
            p.expect(b':')?;
            match (key.as_str(), p.value()?) {
                ("descr", Literal::Str(s)) => descr = Some(s),
                ("fortran_order", Literal::Bool(b)) => fortran_order = Some(b),
                ("shape", Literal::Tuple(t)) => shape = Some(t),
                (k, _) => return Err(Error::BadHeader(format!("unexpected key or value for `{k}`"))),
            }
            match p.peek() {
                Some(b',') => p.pos += 1,
                Some(b'}') => {}
                _ => return Err(p.err("expected `,` or `}`")),
            }
        }
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("trailing characters after dictionary"));
        }
        let missing = |k: &str| Error::BadHeader(format!("missing key `{k}`"));
        Ok(HeaderDict {
            descr: descr.ok_or_else(|| missing("descr"))?,
            fortran_order: fortran_order.ok_or_else(|| missing("fortran_order"))?,
            shape: shape.ok_or_else(|| missing("shape"))?,
        })
    }
}

fn shape_repr(shape: &[usize]) -> String {
    match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        ),
    }
}

/// Version 1.0 header bytes for a C-order `<f4` array of `shape`.
pub fn header_bytes(shape: &[usize]) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': {}, }}",
        shape_repr(shape)
    );
    if let Some(first) = shape.first() {
        let digits = first.to_string().len();
        dict.push_str(&" ".repeat(GROWTH_AXIS_MAX_DIGITS.saturating_sub(digits)));
    }
    let hlen = dict.len() + 1;
    // numpy pads a full extra block when already aligned
    let padlen = ARRAY_ALIGN - ((MAGIC.len() + 2 + 2 + hlen) % ARRAY_ALIGN);
    let total = hlen + padlen;
    let mut out = Vec::with_capacity(10 + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(total as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', padlen));
    out.push(b'\n');
    out
}

pub fn encode_map(map: &FeatureMap, writer: &mut impl Write) -> io::Result<()> {
    writer.write_all(&header_bytes(&map.shape()))?;
    for v in map.values() {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    encode_map(map, &mut writer)
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}
