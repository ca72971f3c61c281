//! DICOM Part 10 reader for Explicit and Implicit VR Little Endian.
//!
//! The reader never loads PixelData: parsing stops at (7FE0,0010), so the
//! cost is bounded by the header size. Every length field is checked
//! against the remaining input before it is used.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::dictionary;
use super::{DataSet, DicomError, Element, Tag, TransferSyntax, Value, Vr};

const PREAMBLE_LEN: usize = 128;
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

#[derive(Clone, Debug)]
pub struct ParseOptions {
    /// Input is a bare data set (no preamble, no meta group).
    pub raw_dataset: bool,
    /// Encoding assumed for raw data sets.
    pub transfer_syntax: TransferSyntax,
    /// Maximum sequence nesting depth.
    pub max_depth: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            raw_dataset: false,
            transfer_syntax: TransferSyntax::ExplicitVrLittleEndian,
            max_depth: 16,
        }
    }
}

/// Parses a Part 10 file image: 128-byte preamble, `DICM`, file meta group,
/// then the data set. Meta group elements are not included in the result.
pub fn parse_part10(bytes: &[u8]) -> Result<DataSet, DicomError> {
    parse_with(bytes, &ParseOptions::default())
}

/// Parses a bare data set in the given encoding.
pub fn parse_dataset(bytes: &[u8], ts: TransferSyntax) -> Result<DataSet, DicomError> {
    let opts = ParseOptions {
        raw_dataset: true,
        transfer_syntax: ts,
        ..ParseOptions::default()
    };
    parse_with(bytes, &opts)
}

pub fn parse_with(bytes: &[u8], opts: &ParseOptions) -> Result<DataSet, DicomError> {
    let mut cur = Cursor::new(bytes);
    let ts = if opts.raw_dataset {
        opts.transfer_syntax
    } else {
        if bytes.len() < PREAMBLE_LEN + 4 {
            return Err(DicomError::MissingMagic);
        }
        if &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != b"DICM" {
            return Err(DicomError::MissingMagic);
        }
        cur.pos = PREAMBLE_LEN + 4;
        read_meta_group(&mut cur)?
    };
    let mut reader = Reader {
        explicit: ts == TransferSyntax::ExplicitVrLittleEndian,
        max_depth: opts.max_depth,
    };
    let mut ds = reader.read_dataset(&mut cur, Stop::End, 0)?;
    ds.transfer_syntax = ts.uid().to_string();
    Ok(ds)
}

/// Reads a file incrementally, pulling only as many bytes as the header
/// needs. Large pixel payloads are never read.
pub fn read_part10_file(path: &Path) -> std::io::Result<Result<DataSet, DicomError>> {
    let mut f = File::open(path)?;
    let total = f.metadata()?.len() as usize;
    let mut buf = Vec::new();
    let mut want = 64 * 1024;
    loop {
        let target = want.min(total);
        if buf.len() < target {
            let mut chunk = vec![0u8; target - buf.len()];
            f.read_exact(&mut chunk)?;
            buf.extend_from_slice(&chunk);
        }
        match parse_part10(&buf) {
            Err(DicomError::TruncatedFile { .. }) if buf.len() < total => want *= 4,
            other => return Ok(other),
        }
    }
}

fn read_meta_group(cur: &mut Cursor<'_>) -> Result<TransferSyntax, DicomError> {
    let mut reader = Reader {
        explicit: true,
        max_depth: 1,
    };
    let mut uid = None;
    while cur.remaining() >= 4 && cur.peek_u16()? == 0x0002 {
        let e = reader
            .read_element(cur, 0)?
            .expect("meta group never contains pixel data");
        if e.tag == Tag::TRANSFER_SYNTAX_UID {
            uid = e.as_str().map(str::to_string);
        }
    }
    let uid = uid.ok_or_else(|| DicomError::Malformed {
        offset: cur.pos,
        reason: "file meta group lacks TransferSyntaxUID".into(),
    })?;
    TransferSyntax::from_uid(&uid)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DicomError> {
        if n > self.remaining() {
            return Err(DicomError::TruncatedFile {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DicomError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DicomError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn peek_u16(&self) -> Result<u16, DicomError> {
        let mut c = Cursor {
            data: self.data,
            pos: self.pos,
        };
        c.u16()
    }

    fn tag(&mut self) -> Result<Tag, DicomError> {
        let g = self.u16()?;
        let e = self.u16()?;
        Ok(Tag::new(g, e))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stop {
    End,
    ItemDelimiter,
}

struct Reader {
    explicit: bool,
    max_depth: usize,
}

impl Reader {
    fn read_dataset(
        &mut self,
        cur: &mut Cursor<'_>,
        stop: Stop,
        depth: usize,
    ) -> Result<DataSet, DicomError> {
        let mut ds = DataSet::new();
        loop {
            if cur.remaining() == 0 {
                if stop == Stop::ItemDelimiter {
                    return Err(DicomError::TruncatedFile {
                        offset: cur.pos,
                        needed: 8,
                        available: 0,
                    });
                }
                return Ok(ds);
            }
            if stop == Stop::ItemDelimiter {
                let save = cur.pos;
                let tag = cur.tag()?;
                if tag == Tag::ITEM_DELIMITATION {
                    cur.u32()?;
                    return Ok(ds);
                }
                cur.pos = save;
            }
            match self.read_element(cur, depth)? {
                Some(e) => {
                    let tag = e.tag;
                    ds.push(e).map_err(|_| DicomError::Malformed {
                        offset: cur.pos,
                        reason: format!("tag {tag} out of order"),
                    })?;
                }
                // PixelData: the rest of the input is pixel payload.
                None => return Ok(ds),
            }
        }
    }

    /// `None` signals that PixelData was reached.
    fn read_element(
        &mut self,
        cur: &mut Cursor<'_>,
        depth: usize,
    ) -> Result<Option<Element>, DicomError> {
        let start = cur.pos;
        let tag = cur.tag()?;
        if tag.group == 0xFFFE {
            return Err(DicomError::Malformed {
                offset: start,
                reason: format!("unexpected delimiter {tag}"),
            });
        }
        let (vr, len) = if self.explicit || tag.group == 0x0002 {
            let b = cur.take(2)?;
            let vr = Vr::from_bytes([b[0], b[1]]);
            if !b.iter().all(u8::is_ascii_uppercase) {
                return Err(DicomError::Malformed {
                    offset: start,
                    reason: format!("invalid VR bytes {b:02X?}"),
                });
            }
            // Unrecognised VR codes use the 32-bit layout.
            if vr.has_long_length() || !vr.is_known() {
                cur.take(2)?;
                (vr, cur.u32()?)
            } else {
                (vr, cur.u16()? as u32)
            }
        } else {
            (dictionary::implicit_vr(tag), cur.u32()?)
        };

        if tag == Tag::PIXEL_DATA {
            return Ok(None);
        }

        let is_seq = vr == Vr::SQ || (len == UNDEFINED_LENGTH && vr == Vr::UN);
        if is_seq {
            if depth >= self.max_depth {
                return Err(DicomError::Malformed {
                    offset: start,
                    reason: "sequence nesting too deep".into(),
                });
            }
            let items = if len == UNDEFINED_LENGTH {
                self.read_items_undefined(cur, depth + 1)?
            } else {
                let body = cur.take(len as usize)?;
                let mut sub = Cursor::new(body);
                let base = cur.pos - body.len();
                self.read_items_defined(&mut sub, depth + 1)
                    .map_err(|e| rebase(e, base))?
            };
            return Ok(Some(Element::new(tag, Vr::SQ, Value::Sequence(items))));
        }
        if len == UNDEFINED_LENGTH {
            return Err(DicomError::Malformed {
                offset: start,
                reason: format!("undefined length on non-sequence {tag} {vr}"),
            });
        }
        let raw = cur.take(len as usize)?;
        Ok(Some(Element::new(tag, vr, decode_value(vr, raw))))
    }

    fn read_item_header(&mut self, cur: &mut Cursor<'_>) -> Result<(Tag, u32), DicomError> {
        let tag = cur.tag()?;
        let len = cur.u32()?;
        Ok((tag, len))
    }

    fn read_items_defined(
        &mut self,
        cur: &mut Cursor<'_>,
        depth: usize,
    ) -> Result<Vec<DataSet>, DicomError> {
        let mut items = Vec::new();
        while cur.remaining() > 0 {
            let at = cur.pos;
            let (tag, len) = self.read_item_header(cur)?;
            if tag == Tag::SEQUENCE_DELIMITATION {
                break;
            }
            if tag != Tag::ITEM {
                return Err(DicomError::Malformed {
                    offset: at,
                    reason: format!("expected item, found {tag}"),
                });
            }
            items.push(self.read_item_body(cur, len, depth)?);
        }
        Ok(items)
    }

    fn read_items_undefined(
        &mut self,
        cur: &mut Cursor<'_>,
        depth: usize,
    ) -> Result<Vec<DataSet>, DicomError> {
        let mut items = Vec::new();
        loop {
            let at = cur.pos;
            let (tag, len) = self.read_item_header(cur)?;
            if tag == Tag::SEQUENCE_DELIMITATION {
                return Ok(items);
            }
            if tag != Tag::ITEM {
                return Err(DicomError::Malformed {
                    offset: at,
                    reason: format!("expected item, found {tag}"),
                });
            }
            items.push(self.read_item_body(cur, len, depth)?);
        }
    }

    fn read_item_body(
        &mut self,
        cur: &mut Cursor<'_>,
        len: u32,
        depth: usize,
    ) -> Result<DataSet, DicomError> {
        if len == UNDEFINED_LENGTH {
            self.read_dataset(cur, Stop::ItemDelimiter, depth)
        } else {
            let body = cur.take(len as usize)?;
            let base = cur.pos - body.len();
            let mut sub = Cursor::new(body);
            self.read_dataset(&mut sub, Stop::End, depth)
                .map_err(|e| rebase(e, base))
        }
    }
}

fn rebase(e: DicomError, base: usize) -> DicomError {
    match e {
        DicomError::TruncatedFile {
            offset,
            needed,
            available,
        } => DicomError::Malformed {
            offset: base + offset,
            reason: format!("item content overruns its length ({needed} needed, {available} left)"),
        },
        DicomError::Malformed { offset, reason } => DicomError::Malformed {
            offset: base + offset,
            reason,
        },
        other => other,
    }
}

/// Decodes a primitive value from its little-endian bytes.
pub(crate) fn decode_value(vr: Vr, raw: &[u8]) -> Value {
    match vr.as_str() {
        "DS" => {
            let parts = split_text(vr, raw);
            let nums: Option<Vec<f64>> = parts.iter().map(|p| super::parse_decimal(p)).collect();
            match nums {
                Some(v) => Value::Decimal(v),
                None => Value::Text(parts),
            }
        }
        "IS" => {
            let parts = split_text(vr, raw);
            let nums: Option<Vec<i64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
            match nums {
                Some(v) => Value::Integer(v),
                None => Value::Text(parts),
            }
        }
        "US" => Value::Integer(chunks::<2>(raw).map(|b| u16::from_le_bytes(b) as i64).collect()),
        "SS" => Value::Integer(chunks::<2>(raw).map(|b| i16::from_le_bytes(b) as i64).collect()),
        "UL" => Value::Integer(chunks::<4>(raw).map(|b| u32::from_le_bytes(b) as i64).collect()),
        "SL" => Value::Integer(chunks::<4>(raw).map(|b| i32::from_le_bytes(b) as i64).collect()),
        "SV" => Value::Integer(chunks::<8>(raw).map(i64::from_le_bytes).collect()),
        "UV" => Value::Integer(chunks::<8>(raw).map(|b| u64::from_le_bytes(b) as i64).collect()),
        "FL" => Value::Decimal(chunks::<4>(raw).map(|b| f32::from_le_bytes(b) as f64).collect()),
        "FD" => Value::Decimal(chunks::<8>(raw).map(f64::from_le_bytes).collect()),
        "AT" => Value::Text(
            chunks::<4>(raw)
                .map(|b| {
                    let g = u16::from_le_bytes([b[0], b[1]]);
                    let e = u16::from_le_bytes([b[2], b[3]]);
                    Tag::new(g, e).json_key()
                })
                .collect(),
        ),
        _ if vr.is_text() => Value::Text(split_text(vr, raw)),
        _ => Value::Bytes(raw.to_vec()),
    }
}

fn chunks<const N: usize>(raw: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
    raw.chunks_exact(N).map(|c| {
        let mut a = [0u8; N];
        a.copy_from_slice(c);
        a
    })
}

fn split_text(vr: Vr, raw: &[u8]) -> Vec<String> {
    let s = String::from_utf8_lossy(raw);
    let trimmed = s.trim_end_matches(['\0', ' ']);
    if trimmed.is_empty() {
        return Vec::new();
    }
    if vr.is_single_valued_text() {
        return vec![trimmed.to_string()];
    }
    trimmed
        .split('\\')
        .map(|p| p.trim_end_matches(['\0', ' ']).trim_start_matches(' ').to_string())
        .collect()
}
