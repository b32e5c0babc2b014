//! NPY v1.0 encoding for [`Tensor`].
//!
//! Only C-order, little-endian `<f4`, `<i4` and `|u1` arrays are supported.
//! Headers are written exactly the way numpy writes them so files produced
//! here are byte-identical to `numpy.save` output for the same array.

use std::fs;
use std::path::Path;

use super::tensor::{element_count, DType, Tensor, TensorData};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const HEADER_ALIGN: usize = 64;

/// Reads a tensor from an NPY file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Corruption(msg) => Error::Corruption(format!("{}: {msg}", path.display())),
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes a tensor as an NPY v1.0 file.
pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let header = header_text(tensor.dtype(), tensor.shape());
    let header_len = header.len();
    if header_len > u16::MAX as usize {
        return Err(Error::Format(format!(
            "header of {header_len} bytes does not fit NPY v1.0"
        )));
    }

    let payload = tensor.payload_bytes();
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header_len + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < MAGIC.len() + 2 || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => {
            let raw = bytes
                .get(8..10)
                .ok_or_else(|| Error::Format("truncated header length".into()))?;
            (u16::from_le_bytes([raw[0], raw[1]]) as usize, 10)
        }
        2 | 3 => {
            let raw = bytes
                .get(8..12)
                .ok_or_else(|| Error::Format("truncated header length".into()))?;
            (
                u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as usize,
                12,
            )
        }
        v => {
            return Err(Error::Format(format!(
                "unsupported NPY version {v}.{}",
                bytes[7]
            )))
        }
    };
    let header_end = header_start + header_len;
    let header = bytes
        .get(header_start..header_end)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header =
        std::str::from_utf8(header).map_err(|_| Error::Format("header is not ASCII".into()))?;
    let dict = HeaderDict::parse(header)?;
    if dict.fortran_order {
        return Err(Error::Format(
            "fortran_order arrays are not supported".into(),
        ));
    }

    let count = element_count(&dict.shape)?;
    let payload = &bytes[header_end..];
    let expected = count * dict.dtype.size();
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "shape {:?} of {} needs {expected} payload bytes, found {}",
            dict.shape,
            dict.dtype,
            payload.len()
        )));
    }

    let data = match dict.dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
    };
    Tensor::new(dict.shape, data)
}

/// Header dictionary padded with spaces and a trailing newline so that the
/// payload starts on a 64-byte boundary.
fn header_text(dtype: DType, shape: &[usize]) -> String {
    let shape = match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        dtype.descr()
    );
    let preamble = MAGIC.len() + 4;
    let unpadded = preamble + header.len() + 1;
    let padding = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    header.extend(std::iter::repeat_n(' ', padding));
    header.push('\n');
    header
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    dtype: DType,
    fortran_order: bool,
    shape: Vec<usize>,
}

#[derive(Debug, PartialEq)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let mut p = Parser {
            src: text.as_bytes(),
            pos: 0,
        };
        p.expect(b'{')?;
        let mut descr = None;
        let mut fortran = None;
        let mut shape = None;
        loop {
            p.skip_ws();
            if p.eat(b'}') {
                break;
            }
            let key = match p.literal()? {
                Literal::Str(s) => s,
                other => return Err(Error::Format(format!("non-string key {other:?}"))),
            };
            p.skip_ws();
            p.expect(b':')?;
            let value = p.literal()?;
            match (key.as_str(), value) {
                ("descr", Literal::Str(s)) => {
                    descr = Some(
                        DType::from_descr(&s)
                            .ok_or_else(|| Error::Format(format!("unsupported descr '{s}'")))?,
                    )
                }
                ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
                ("shape", Literal::Tuple(t)) => shape = Some(t),
                (k, v) => return Err(Error::Format(format!("unexpected header entry {k}: {v:?}"))),
            }
            p.skip_ws();
            if !p.eat(b',') {
                p.skip_ws();
                p.expect(b'}')?;
                break;
            }
        }
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(Error::Format(
                "trailing bytes after header dictionary".into(),
            ));
        }
        Ok(HeaderDict {
            dtype: descr.ok_or_else(|| Error::Format("header missing 'descr'".into()))?,
            fortran_order: fortran
                .ok_or_else(|| Error::Format("header missing 'fortran_order'".into()))?,
            shape: shape.ok_or_else(|| Error::Format("header missing 'shape'".into()))?,
        })
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        self.skip_ws();
        if self.eat(c) {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected '{}' at header offset {}",
                c as char, self.pos
            )))
        }
    }

    fn literal(&mut self) -> Result<Literal> {
        self.skip_ws();
        match self.src.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos] != q {
                    self.pos += 1;
                }
                if self.pos == self.src.len() {
                    return Err(Error::Format("unterminated string in header".into()));
                }
                let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
                self.pos += 1;
                Ok(Literal::Str(s))
            }
            Some(b'(') => {
                self.pos += 1;
                let mut dims = Vec::new();
                loop {
                    self.skip_ws();
                    if self.eat(b')') {
                        break;
                    }
                    let start = self.pos;
                    while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        self.pos += 1;
                    }
                    let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
                    let dim = digits.parse::<usize>().map_err(|_| {
                        Error::Format(format!("bad shape extent at offset {start}"))
                    })?;
                    dims.push(dim);
                    self.skip_ws();
                    if !self.eat(b',') {
                        self.expect(b')')?;
                        break;
                    }
                }
                Ok(Literal::Tuple(dims))
            }
            _ => {
                let rest = &self.src[self.pos..];
                if rest.starts_with(b"True") {
                    self.pos += 4;
                    Ok(Literal::Bool(true))
                } else if rest.starts_with(b"False") {
                    self.pos += 5;
                    Ok(Literal::Bool(false))
                } else {
                    Err(Error::Format(format!(
                        "unrecognised literal at header offset {}",
                        self.pos
                    )))
                }
            }
        }
    }
}
