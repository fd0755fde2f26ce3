//! Minimal strict TAR reader.
//!
//! Understands USTAR, PAX `x` records (`path`, `size`, the placeholder status
//! key), GNU `L` long names and skips `g` global headers. Anything else that
//! looks malformed is an error rather than a warning.

use std::collections::BTreeMap;
use std::io::{self, Read, Seek, SeekFrom};

use thiserror::Error;

use super::{padding_len, BLOCK, SOFT_ERROR_PREFIX, STATUS_KEY};

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("truncated archive")]
    Truncated,
    #[error("header checksum mismatch at offset {0}")]
    Checksum(u64),
    #[error("bad numeric field at offset {0}")]
    Number(u64),
    #[error("bad PAX record at offset {0}")]
    Pax(u64),
    #[error("missing end-of-archive marker")]
    NoTerminator,
    #[error("data after end-of-archive marker")]
    TrailingData,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryHeader {
    pub name: String,
    pub size: u64,
    pub typeflag: u8,
    pub pax: BTreeMap<String, String>,
    /// Offset of the first payload byte from the start of the archive.
    pub data_offset: u64,
}

impl EntryHeader {
    pub fn is_file(&self) -> bool {
        matches!(self.typeflag, b'0' | 0 | b'7')
    }
}

/// A fully read entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub name: String,
    pub payload: Vec<u8>,
    pub status: Option<String>,
}

impl ArchiveEntry {
    pub fn soft_error_reason(&self) -> Option<&str> {
        self.status
            .as_deref()
            .and_then(|s| s.strip_prefix(SOFT_ERROR_PREFIX))
    }

    pub fn is_placeholder(&self) -> bool {
        self.soft_error_reason().is_some()
    }
}

/// Header-at-a-time reader over any byte source.
pub struct TarReader<R> {
    inner: R,
    pos: u64,
    /// Payload bytes of the current entry not yet consumed, plus its padding.
    pending: u64,
    done: bool,
}

impl<R: Read> TarReader<R> {
    pub fn new(inner: R) -> Self {
        TarReader {
            inner,
            pos: 0,
            pending: 0,
            done: false,
        }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    fn read_block(&mut self, buf: &mut [u8; BLOCK]) -> Result<bool, ReadError> {
        let mut filled = 0;
        while filled < BLOCK {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(false);
                }
                return Err(ReadError::Truncated);
            }
            filled += n;
        }
        self.pos += BLOCK as u64;
        Ok(true)
    }

    fn skip_pending(&mut self) -> Result<(), ReadError> {
        if self.pending > 0 {
            let n = io::copy(&mut (&mut self.inner).take(self.pending), &mut io::sink())?;
            if n < self.pending {
                return Err(ReadError::Truncated);
            }
            self.pos += n;
            self.pending = 0;
        }
        Ok(())
    }

    fn read_exact_counted(&mut self, len: u64) -> Result<Vec<u8>, ReadError> {
        let mut data = Vec::with_capacity(len.min(1 << 24) as usize);
        let n = (&mut self.inner).take(len).read_to_end(&mut data)? as u64;
        if n < len {
            return Err(ReadError::Truncated);
        }
        self.pos += n;
        Ok(data)
    }

    /// Next regular or other non-meta entry; `None` at the end marker.
    ///
    /// With `strict`, a missing terminator is an error and the second zero
    /// block must follow the first.
    pub fn next_header(&mut self, strict: bool) -> Result<Option<EntryHeader>, ReadError> {
        if self.done {
            return Ok(None);
        }
        self.skip_pending()?;
        let mut pax: BTreeMap<String, String> = BTreeMap::new();
        let mut long_name: Option<String> = None;
        let mut block = [0u8; BLOCK];
        loop {
            let start = self.pos;
            if !self.read_block(&mut block)? {
                if strict {
                    return Err(ReadError::NoTerminator);
                }
                self.done = true;
                return Ok(None);
            }
            if block.iter().all(|&b| b == 0) {
                let mut second = [0u8; BLOCK];
                let got = self.read_block(&mut second)?;
                if strict && (!got || second.iter().any(|&b| b != 0)) {
                    return Err(ReadError::NoTerminator);
                }
                self.done = true;
                return Ok(None);
            }
            verify_checksum(&block, start)?;
            let typeflag = block[156];
            let size = parse_number(&block[124..136]).ok_or(ReadError::Number(start))?;
            match typeflag {
                b'x' => {
                    let data = self.read_exact_counted(size)?;
                    self.skip_padding(size)?;
                    parse_pax(&data, start, &mut pax)?;
                }
                b'g' => {
                    self.read_exact_counted(size)?;
                    self.skip_padding(size)?;
                }
                b'L' => {
                    let data = self.read_exact_counted(size)?;
                    self.skip_padding(size)?;
                    let end = data.iter().position(|&b| b == 0).unwrap_or(data.len());
                    long_name = Some(String::from_utf8_lossy(&data[..end]).into_owned());
                }
                _ => {
                    let name = match pax.get("path") {
                        Some(p) => p.clone(),
                        None => match long_name.take() {
                            Some(n) => n,
                            None => ustar_name(&block),
                        },
                    };
                    let size = match pax.get("size") {
                        Some(s) => s.parse().map_err(|_| ReadError::Pax(start))?,
                        None => size,
                    };
                    let data_offset = self.pos;
                    self.pending = size + padding_len(size) as u64;
                    return Ok(Some(EntryHeader {
                        name,
                        size,
                        typeflag,
                        pax,
                        data_offset,
                    }));
                }
            }
        }
    }

    fn skip_padding(&mut self, size: u64) -> Result<(), ReadError> {
        self.pending = padding_len(size) as u64;
        self.skip_pending()
    }

    /// Reads the payload of the entry returned by the last `next_header`.
    pub fn read_payload(&mut self, header: &EntryHeader) -> Result<Vec<u8>, ReadError> {
        let data = self.read_exact_counted(header.size)?;
        self.pending = padding_len(header.size) as u64;
        Ok(data)
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}

fn verify_checksum(block: &[u8; BLOCK], offset: u64) -> Result<(), ReadError> {
    let stored = parse_number(&block[148..156]).ok_or(ReadError::Checksum(offset))?;
    let sum: u64 = block
        .iter()
        .enumerate()
        .map(|(i, &b)| if (148..156).contains(&i) { 32 } else { u64::from(b) })
        .sum();
    if sum != stored {
        return Err(ReadError::Checksum(offset));
    }
    Ok(())
}

/// Octal (NUL/space terminated) or GNU base-256 numeric field.
fn parse_number(field: &[u8]) -> Option<u64> {
    if field[0] & 0x80 != 0 {
        let mut v: u64 = u64::from(field[0] & 0x7f);
        for &b in &field[1..] {
            v = v.checked_mul(256)?.checked_add(u64::from(b))?;
        }
        return Some(v);
    }
    let s: Vec<u8> = field
        .iter()
        .copied()
        .skip_while(|&b| b == b' ')
        .take_while(|&b| b != 0 && b != b' ')
        .collect();
    if s.is_empty() {
        return Some(0);
    }
    u64::from_str_radix(std::str::from_utf8(&s).ok()?, 8).ok()
}

fn ustar_name(block: &[u8; BLOCK]) -> String {
    let field = |r: std::ops::Range<usize>| {
        let f = &block[r];
        let end = f.iter().position(|&b| b == 0).unwrap_or(f.len());
        String::from_utf8_lossy(&f[..end]).into_owned()
    };
    let name = field(0..100);
    if &block[257..262] == b"ustar" {
        let prefix = field(345..500);
        if !prefix.is_empty() {
            return format!("{prefix}/{name}");
        }
    }
    name
}

fn parse_pax(
    data: &[u8],
    offset: u64,
    out: &mut BTreeMap<String, String>,
) -> Result<(), ReadError> {
    let mut rest = data;
    while !rest.is_empty() {
        if rest.iter().all(|&b| b == 0) {
            break;
        }
        let sp = rest
            .iter()
            .position(|&b| b == b' ')
            .ok_or(ReadError::Pax(offset))?;
        let len: usize = std::str::from_utf8(&rest[..sp])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(ReadError::Pax(offset))?;
        if len <= sp + 1 || len > rest.len() || rest[len - 1] != b'\n' {
            return Err(ReadError::Pax(offset));
        }
        let record = &rest[sp + 1..len - 1];
        let eq = record
            .iter()
            .position(|&b| b == b'=')
            .ok_or(ReadError::Pax(offset))?;
        let key = String::from_utf8_lossy(&record[..eq]).into_owned();
        let value = String::from_utf8_lossy(&record[eq + 1..]).into_owned();
        out.insert(key, value);
        rest = &rest[len..];
    }
    Ok(())
}

/// Strictly parses a complete in-memory archive. Trailing bytes after the
/// terminator are rejected.
pub fn parse_archive(data: &[u8]) -> Result<Vec<ArchiveEntry>, ReadError> {
    let mut r = TarReader::new(data);
    let mut out = Vec::new();
    while let Some(h) = r.next_header(true)? {
        let payload = r.read_payload(&h)?;
        out.push(ArchiveEntry {
            name: h.name.clone(),
            payload,
            status: h.pax.get(STATUS_KEY).cloned(),
        });
    }
    if r.position() != data.len() as u64 {
        return Err(ReadError::TrailingData);
    }
    Ok(out)
}

fn normalize(name: &str) -> &str {
    name.trim_start_matches("./")
}

/// Linear scan for `member` in an archive; payloads of other entries are
/// skipped with seeks. Returns `None` when the member is absent.
pub fn find_member<R: Read + Seek>(
    source: R,
    member: &str,
) -> Result<Option<Vec<u8>>, ReadError> {
    let want = normalize(member);
    let mut r = TarReader::new(SeekSkip(source));
    loop {
        r.seek_pending()?;
        match r.next_header(false)? {
            Some(h) if h.is_file() && normalize(&h.name) == want => {
                return r.read_payload(&h).map(Some);
            }
            Some(_) => {}
            None => return Ok(None),
        }
    }
}

/// Adapter that turns large skips into seeks.
struct SeekSkip<R>(R);

impl<R: Read + Seek> Read for SeekSkip<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.0.read(buf)
    }
}

impl<R: Read + Seek> TarReader<SeekSkip<R>> {
    fn seek_pending(&mut self) -> io::Result<()> {
        if self.pending > 0 {
            self.inner.0.seek(SeekFrom::Current(self.pending as i64))?;
            self.pos += self.pending;
            self.pending = 0;
        }
        Ok(())
    }
}
