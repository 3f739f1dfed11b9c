//! Sorted run files.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! "IMR1" | version: u16 | kind: u8 | record count: u64 | batch id: u64 | frame*
//! ```
//!
//! Writers validate the run order and publish the file with a rename, so a
//! reader never observes a half-written run.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::record::{decode_record_at, encode_record_into, Cursor, Record, RecordKind, FRAME_HEADER};

pub const RUN_MAGIC: &[u8; 4] = b"IMR1";
pub const RUN_VERSION: u16 = 1;
pub const RUN_HEADER_LEN: u64 = 4 + 2 + 1 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunHeader {
    pub kind: RecordKind,
    pub record_count: u64,
    pub batch_id: u64,
}

impl RunHeader {
    fn encode(&self) -> [u8; RUN_HEADER_LEN as usize] {
        let mut out = [0u8; RUN_HEADER_LEN as usize];
        out[..4].copy_from_slice(RUN_MAGIC);
        out[4..6].copy_from_slice(&RUN_VERSION.to_be_bytes());
        out[6] = self.kind as u8;
        out[7..15].copy_from_slice(&self.record_count.to_be_bytes());
        out[15..23].copy_from_slice(&self.batch_id.to_be_bytes());
        out
    }

    fn decode(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(buf, 0);
        if cur.take(4)? != RUN_MAGIC {
            return Err(Error::corrupt(0, "bad run magic"));
        }
        let version = cur.u16()?;
        if version != RUN_VERSION {
            return Err(Error::corrupt(4, format!("unsupported run version {version}")));
        }
        let kind = RecordKind::from_byte(cur.u8()?)
            .ok_or_else(|| Error::corrupt(6, "unknown record kind"))?;
        Ok(RunHeader {
            kind,
            record_count: cur.u64()?,
            batch_id: cur.u64()?,
        })
    }
}

/// Location of one frame inside a run file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub offset: u64,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMeta {
    pub path: PathBuf,
    pub header: RunHeader,
    pub bytes: u64,
}

/// Streams records into a run file, checking order as it goes.
pub struct RunWriter<R: Record + Clone> {
    path: PathBuf,
    tmp: PathBuf,
    out: BufWriter<File>,
    last: Option<R>,
    count: u64,
    batch_id: u64,
    pos: u64,
    scratch: Vec<u8>,
    _kind: PhantomData<R>,
}

impl<R: Record + Clone> RunWriter<R> {
    pub fn create(path: impl AsRef<Path>, batch_id: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        let tmp = tmp_sibling(&path);
        let file = File::create(&tmp).at(&tmp)?;
        let mut out = BufWriter::with_capacity(1 << 16, file);
        let header = RunHeader {
            kind: R::KIND,
            record_count: 0,
            batch_id,
        };
        out.write_all(&header.encode()).at(&tmp)?;
        Ok(RunWriter {
            path,
            tmp,
            out,
            last: None,
            count: 0,
            batch_id,
            pos: RUN_HEADER_LEN,
            scratch: Vec::with_capacity(256),
            _kind: PhantomData,
        })
    }

    /// Appends one record and returns where its frame landed.
    pub fn append(&mut self, record: &R) -> Result<Span> {
        if let Some(prev) = &self.last {
            if prev.run_order(record).is_gt() {
                return Err(Error::SortViolation {
                    index: self.count,
                    prev: format!("{prev:?}"),
                    next: format!("{record:?}"),
                });
            }
        }
        self.scratch.clear();
        encode_record_into(record, &mut self.scratch)?;
        self.out.write_all(&self.scratch).at(&self.tmp)?;
        let span = Span {
            offset: self.pos,
            len: self.scratch.len() as u32,
        };
        self.pos += self.scratch.len() as u64;
        self.count += 1;
        self.last = Some(record.clone());
        Ok(span)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Patches the header and atomically publishes the run at its path.
    pub fn finish(self) -> Result<RunMeta> {
        let RunWriter {
            path,
            tmp,
            out,
            count,
            batch_id,
            pos,
            ..
        } = self;
        let mut file = out.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        let header = RunHeader {
            kind: R::KIND,
            record_count: count,
            batch_id,
        };
        file.seek(SeekFrom::Start(0)).at(&tmp)?;
        file.write_all(&header.encode()).at(&tmp)?;
        file.flush().at(&tmp)?;
        drop(file);
        fs::rename(&tmp, &path).at(&path)?;
        Ok(RunMeta {
            path,
            header,
            bytes: pos,
        })
    }
}

/// Writes `records` as a run; the input must already be in run order.
pub fn write_sorted_run<'a, R, I>(path: impl AsRef<Path>, batch_id: u64, records: I) -> Result<RunMeta>
where
    R: Record + Clone + 'a,
    I: IntoIterator<Item = &'a R>,
{
    let mut w = RunWriter::create(path, batch_id)?;
    for r in records {
        w.append(r)?;
    }
    w.finish()
}

/// Read side of a run file. Immutable once opened.
#[derive(Debug)]
pub struct RunReader<R: Record> {
    path: PathBuf,
    file: File,
    header: RunHeader,
    len: u64,
    _kind: PhantomData<R>,
}

impl<R: Record> RunReader<R> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.display().to_string())
            } else {
                Error::io(&path, e)
            }
        })?;
        let len = file.metadata().at(&path)?.len();
        let mut buf = [0u8; RUN_HEADER_LEN as usize];
        let got = read_up_to(&mut file, &mut buf).at(&path)?;
        let header = RunHeader::decode(&buf[..got])?;
        if header.kind != R::KIND {
            return Err(Error::corrupt(
                6,
                format!("{} holds {:?} records, expected {:?}", path.display(), header.kind, R::KIND),
            ));
        }
        Ok(RunReader {
            path,
            file,
            header,
            len,
            _kind: PhantomData,
        })
    }

    pub fn header(&self) -> &RunHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Sequential scan in written order.
    pub fn iter(&self) -> Result<RunIter<R>> {
        let mut file = File::open(&self.path).at(&self.path)?;
        file.seek(SeekFrom::Start(RUN_HEADER_LEN)).at(&self.path)?;
        Ok(RunIter {
            reader: BufReader::with_capacity(1 << 16, file),
            path: self.path.clone(),
            pos: RUN_HEADER_LEN,
            remaining: self.header.record_count,
            end: self.len,
            buf: Vec::new(),
            _kind: PhantomData,
        })
    }

    pub fn read_all(&self) -> Result<Vec<R>> {
        self.iter()?.collect()
    }

    /// Positioned read of a single frame.
    pub fn read_at(&self, span: Span) -> Result<R> {
        let mut buf = vec![0u8; span.len as usize];
        read_exact_at(&self.file, &mut buf, span.offset).at(&self.path)?;
        let (record, used) = decode_record_at::<R>(&buf, span.offset)?;
        if used != buf.len() {
            return Err(Error::corrupt(span.offset, "span length does not match frame"));
        }
        Ok(record)
    }
}

pub struct RunIter<R: Record> {
    reader: BufReader<File>,
    path: PathBuf,
    pos: u64,
    remaining: u64,
    end: u64,
    buf: Vec<u8>,
    _kind: PhantomData<R>,
}

impl<R: Record> RunIter<R> {
    fn next_record(&mut self) -> Result<R> {
        let mut head = [0u8; FRAME_HEADER];
        let got = read_up_to(&mut self.reader, &mut head).at(&self.path)?;
        if got < FRAME_HEADER {
            return Err(Error::corrupt(self.pos + got as u64, "truncated frame header"));
        }
        let body_len = u32::from_be_bytes(head) as u64;
        if self.pos + FRAME_HEADER as u64 + body_len > self.end {
            return Err(Error::corrupt(self.pos, "frame runs past end of file"));
        }
        self.buf.clear();
        self.buf.extend_from_slice(&head);
        self.buf.resize(FRAME_HEADER + body_len as usize, 0);
        self.reader.read_exact(&mut self.buf[FRAME_HEADER..]).at(&self.path)?;
        let (record, used) = decode_record_at::<R>(&self.buf, self.pos)?;
        self.pos += used as u64;
        Ok(record)
    }
}

impl<R: Record> Iterator for RunIter<R> {
    type Item = Result<R>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let r = self.next_record();
        if r.is_err() {
            self.remaining = 0;
        }
        Some(r)
    }
}

/// Opens a run for reading.
pub fn open_sorted_run<R: Record>(path: impl AsRef<Path>) -> Result<RunReader<R>> {
    RunReader::open(path)
}

/// Reads all records of a run, or an empty list if the file is absent.
pub fn read_run_or_empty<R: Record>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    match RunReader::<R>::open(path) {
        Ok(r) => r.read_all(),
        Err(Error::NotFound(_)) => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

/// Sorted list of `*.run` files in `dir`.
pub fn list_runs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.extension().is_some_and(|e| e == "run") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub(crate) fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(unix)]
pub(crate) fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    std::os::unix::fs::FileExt::read_exact_at(file, buf, offset)
}

#[cfg(not(unix))]
pub(crate) fn read_exact_at(mut file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    file.seek(SeekFrom::Start(offset))?;
    file.read_exact(buf)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}
