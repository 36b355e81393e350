//! Keyed columnar table with Zstandard-compressed text columns.
//!
//! On disk a table is two files in its directory:
//!
//! * `<name>.cols`, a columnar segment written by [`Table::compact`]. Each
//!   column is stored contiguously; text-heavy columns hold one zstd frame
//!   (level 3) per cell so single rows decode without touching neighbours.
//! * `<name>.log`, an append-only log of puts and deletes since the last
//!   compaction. Cells in the log are already in their stored encoding.
//!
//! Opening a table loads the segment and replays the log. A torn entry at the
//! end of the log is discarded. Column 0 is the row key.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

pub const ZSTD_LEVEL: i32 = 3;

const SEGMENT_MAGIC: &[u8; 4] = b"HLTC";
const SEGMENT_VERSION: u32 = 1;
const LOG_PUT: u8 = 1;
const LOG_DELETE: u8 = 2;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt table file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("row has {got} cells, schema {table} expects {expected}")]
    Arity {
        table: &'static str,
        expected: usize,
        got: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TableError + '_ {
    move |source| TableError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ColumnSpec {
    pub name: &'static str,
    pub compressed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Schema {
    pub name: &'static str,
    pub columns: &'static [ColumnSpec],
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Cell {
    Plain(String),
    Zstd(Vec<u8>),
}

impl Cell {
    fn encode(text: String, compressed: bool) -> Cell {
        if compressed {
            // Compressing an in-memory buffer cannot fail at a valid level.
            let bytes =
                zstd::bulk::compress(text.as_bytes(), ZSTD_LEVEL).expect("zstd compression of in-memory buffer");
            Cell::Zstd(bytes)
        } else {
            Cell::Plain(text)
        }
    }

    fn stored_bytes(&self) -> &[u8] {
        match self {
            Cell::Plain(s) => s.as_bytes(),
            Cell::Zstd(b) => b,
        }
    }

    fn from_stored(bytes: Vec<u8>, compressed: bool) -> Result<Cell, String> {
        if compressed {
            Ok(Cell::Zstd(bytes))
        } else {
            String::from_utf8(bytes)
                .map(Cell::Plain)
                .map_err(|e| format!("plain cell is not UTF-8: {e}"))
        }
    }

    fn decode(&self) -> Result<String, String> {
        match self {
            Cell::Plain(s) => Ok(s.clone()),
            Cell::Zstd(b) => {
                let raw = zstd::stream::decode_all(b.as_slice()).map_err(|e| format!("zstd frame: {e}"))?;
                String::from_utf8(raw).map_err(|e| format!("decompressed cell is not UTF-8: {e}"))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Row(Vec<Cell>);

impl Row {
    fn key(&self) -> &str {
        match &self.0[0] {
            Cell::Plain(k) => k,
            Cell::Zstd(_) => unreachable!("key column is never compressed"),
        }
    }
}

/// Borrowed view of a row's uncompressed columns, used for cheap filtering.
pub struct PlainView<'a> {
    row: &'a Row,
}

impl PlainView<'_> {
    /// Returns the column's text if it is stored uncompressed.
    pub fn get(&self, column: usize) -> Option<&str> {
        match self.row.0.get(column)? {
            Cell::Plain(s) => Some(s),
            Cell::Zstd(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TableFootprint {
    pub rows: usize,
    pub bytes_on_disk: u64,
}

#[derive(Debug)]
pub struct Table {
    schema: Schema,
    segment_path: PathBuf,
    log_path: PathBuf,
    rows: RwLock<BTreeMap<String, Row>>,
    log: Mutex<BufWriter<File>>,
}

impl Table {
    pub fn open(dir: &Path, schema: Schema) -> Result<Table, TableError> {
        assert!(
            !schema.columns.is_empty() && !schema.columns[0].compressed,
            "column 0 must be an uncompressed key"
        );
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let segment_path = dir.join(format!("{}.cols", schema.name));
        let log_path = dir.join(format!("{}.log", schema.name));

        let mut rows = BTreeMap::new();
        if segment_path.exists() {
            for row in read_segment(&segment_path, &schema)? {
                rows.insert(row.key().to_string(), row);
            }
        }
        let valid_len = if log_path.exists() {
            replay_log(&log_path, &schema, &mut rows)?
        } else {
            0
        };

        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        // Drop a torn tail so new entries start on a record boundary.
        file.set_len(valid_len).map_err(io_err(&log_path))?;

        Ok(Table {
            schema,
            segment_path,
            log_path,
            rows: RwLock::new(rows),
            log: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.rows.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts or replaces the row keyed by `cells[0]`.
    pub fn put(&self, cells: Vec<String>) -> Result<(), TableError> {
        if cells.len() != self.schema.columns.len() {
            return Err(TableError::Arity {
                table: self.schema.name,
                expected: self.schema.columns.len(),
                got: cells.len(),
            });
        }
        let row = Row(cells
            .into_iter()
            .zip(self.schema.columns)
            .map(|(text, spec)| Cell::encode(text, spec.compressed))
            .collect());

        let mut log = self.log.lock();
        let mut entry = vec![LOG_PUT];
        for cell in &row.0 {
            write_blob(&mut entry, cell.stored_bytes());
        }
        log.write_all(&entry)
            .and_then(|_| log.flush())
            .map_err(io_err(&self.log_path))?;
        self.rows.write().insert(row.key().to_string(), row);
        Ok(())
    }

    pub fn delete(&self, key: &str) -> Result<bool, TableError> {
        let mut log = self.log.lock();
        if !self.rows.read().contains_key(key) {
            return Ok(false);
        }
        let mut entry = vec![LOG_DELETE];
        write_blob(&mut entry, key.as_bytes());
        log.write_all(&entry)
            .and_then(|_| log.flush())
            .map_err(io_err(&self.log_path))?;
        self.rows.write().remove(key);
        Ok(true)
    }

    pub fn get(&self, key: &str) -> Result<Option<Vec<String>>, TableError> {
        let row = self.rows.read().get(key).cloned();
        row.map(|r| self.decode_row(&r)).transpose()
    }

    /// Rows whose key starts with `prefix`, in key order.
    pub fn scan_prefix(&self, prefix: &str) -> Result<Vec<Vec<String>>, TableError> {
        let matched: Vec<Row> = {
            let rows = self.rows.read();
            rows.range::<str, _>((Bound::Included(prefix), Bound::Unbounded))
                .take_while(|(k, _)| k.starts_with(prefix))
                .map(|(_, r)| r.clone())
                .collect()
        };
        matched.iter().map(|r| self.decode_row(r)).collect()
    }

    /// Rows accepted by `filter`, which sees only uncompressed columns, in
    /// key order. Compressed columns are decoded for matching rows only.
    pub fn scan_where(&self, filter: impl Fn(&PlainView<'_>) -> bool) -> Result<Vec<Vec<String>>, TableError> {
        let matched: Vec<Row> = {
            let rows = self.rows.read();
            rows.values()
                .filter(|r| filter(&PlainView { row: r }))
                .cloned()
                .collect()
        };
        matched.iter().map(|r| self.decode_row(r)).collect()
    }

    /// Uncompressed columns of the rows accepted by `filter`, in key order.
    /// Nothing is decompressed.
    pub fn scan_plain<T>(
        &self,
        filter: impl Fn(&PlainView<'_>) -> bool,
        project: impl Fn(&PlainView<'_>) -> T,
    ) -> Vec<T> {
        let rows = self.rows.read();
        rows.values()
            .map(|row| PlainView { row })
            .filter(|v| filter(v))
            .map(|v| project(&v))
            .collect()
    }

    /// Rewrites the segment with current contents and truncates the log.
    pub fn compact(&self) -> Result<TableFootprint, TableError> {
        let mut log = self.log.lock();
        log.flush().map_err(io_err(&self.log_path))?;
        {
            let rows = self.rows.read();
            write_segment(&self.segment_path, &self.schema, rows.values())?;
        }
        let file = log.get_mut();
        file.set_len(0).map_err(io_err(&self.log_path))?;
        file.sync_all().map_err(io_err(&self.log_path))?;
        drop(log);
        self.footprint()
    }

    pub fn footprint(&self) -> Result<TableFootprint, TableError> {
        self.log.lock().flush().map_err(io_err(&self.log_path))?;
        let mut bytes = 0;
        for path in [&self.segment_path, &self.log_path] {
            if path.exists() {
                bytes += fs::metadata(path).map_err(io_err(path))?.len();
            }
        }
        Ok(TableFootprint {
            rows: self.len(),
            bytes_on_disk: bytes,
        })
    }

    pub fn sync(&self) -> Result<(), TableError> {
        let mut log = self.log.lock();
        log.flush().map_err(io_err(&self.log_path))?;
        log.get_ref().sync_data().map_err(io_err(&self.log_path))
    }

    fn decode_row(&self, row: &Row) -> Result<Vec<String>, TableError> {
        row.0
            .iter()
            .map(|c| c.decode())
            .collect::<Result<_, _>>()
            .map_err(|detail| TableError::Corrupt {
                path: self.segment_path.clone(),
                detail: format!("row {:?}: {detail}", row.key()),
            })
    }
}

impl Drop for Table {
    fn drop(&mut self) {
        let _ = self.log.get_mut().flush();
    }
}

fn write_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 if filled == 0 => return Ok(false),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => filled += n,
        }
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_blob<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Applies log entries to `rows`; returns the byte length of the valid prefix.
fn replay_log(path: &Path, schema: &Schema, rows: &mut BTreeMap<String, Row>) -> Result<u64, TableError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut cursor = io::Cursor::new(bytes.as_slice());
    let mut valid = 0u64;
    loop {
        let mut tag = [0u8; 1];
        match read_exact_or_eof(&mut cursor, &mut tag) {
            Ok(true) => {}
            Ok(false) => break,
            Err(_) => break,
        }
        let entry = match tag[0] {
            LOG_PUT => schema
                .columns
                .iter()
                .map(|spec| read_blob(&mut cursor).map(|b| (b, spec.compressed)))
                .collect::<io::Result<Vec<_>>>()
                .map(Some),
            LOG_DELETE => read_blob(&mut cursor).map(|key| {
                if let Ok(key) = String::from_utf8(key) {
                    rows.remove(&key);
                }
                None
            }),
            other => {
                return Err(TableError::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("unknown log tag {other} at offset {valid}"),
                })
            }
        };
        match entry {
            Ok(Some(cells)) => {
                let row = cells
                    .into_iter()
                    .map(|(b, compressed)| Cell::from_stored(b, compressed))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|detail| TableError::Corrupt {
                        path: path.to_path_buf(),
                        detail,
                    })?;
                let row = Row(row);
                rows.insert(row.key().to_string(), row);
            }
            Ok(None) => {}
            // Torn write at the tail.
            Err(_) => break,
        }
        valid = cursor.position();
    }
    Ok(valid)
}

fn write_segment<'a>(
    path: &Path,
    schema: &Schema,
    rows: impl Iterator<Item = &'a Row> + Clone,
) -> Result<(), TableError> {
    let tmp = path.with_extension("cols.tmp");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    let count = rows.clone().count() as u64;
    let mut header = Vec::new();
    header.extend_from_slice(SEGMENT_MAGIC);
    header.extend_from_slice(&SEGMENT_VERSION.to_le_bytes());
    header.extend_from_slice(&(schema.columns.len() as u32).to_le_bytes());
    header.extend_from_slice(&count.to_le_bytes());
    w.write_all(&header).map_err(io_err(&tmp))?;

    for (idx, spec) in schema.columns.iter().enumerate() {
        let mut block = Vec::new();
        write_blob(&mut block, spec.name.as_bytes());
        block.push(spec.compressed as u8);
        for row in rows.clone() {
            write_blob(&mut block, row.0[idx].stored_bytes());
        }
        w.write_all(&block).map_err(io_err(&tmp))?;
    }
    let file = w.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_segment(path: &Path, schema: &Schema) -> Result<Vec<Row>, TableError> {
    let corrupt = |detail: String| TableError::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != SEGMENT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(io_err(path))?;
    if version != SEGMENT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let ncols = read_u32(&mut r).map_err(io_err(path))? as usize;
    if ncols != schema.columns.len() {
        return Err(corrupt(format!(
            "segment has {ncols} columns, schema {} has {}",
            schema.name,
            schema.columns.len()
        )));
    }
    let mut count = [0u8; 8];
    r.read_exact(&mut count).map_err(io_err(path))?;
    let count = u64::from_le_bytes(count) as usize;

    let mut columns: Vec<Vec<Cell>> = Vec::with_capacity(ncols);
    for spec in schema.columns {
        let name = read_blob(&mut r).map_err(io_err(path))?;
        if name != spec.name.as_bytes() {
            return Err(corrupt(format!(
                "expected column {:?}, found {:?}",
                spec.name,
                String::from_utf8_lossy(&name)
            )));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io_err(path))?;
        if (flag[0] != 0) != spec.compressed {
            return Err(corrupt(format!("compression flag mismatch on {:?}", spec.name)));
        }
        let mut cells = Vec::with_capacity(count);
        for _ in 0..count {
            let blob = read_blob(&mut r).map_err(io_err(path))?;
            cells.push(Cell::from_stored(blob, spec.compressed).map_err(corrupt)?);
        }
        columns.push(cells);
    }

    let mut iters: Vec<_> = columns.into_iter().map(Vec::into_iter).collect();
    Ok((0..count)
        .map(|_| Row(iters.iter_mut().filter_map(Iterator::next).collect()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: Schema = Schema {
        name: "t",
        columns: &[
            ColumnSpec {
                name: "key",
                compressed: false,
            },
            ColumnSpec {
                name: "tag",
                compressed: false,
            },
            ColumnSpec {
                name: "body",
                compressed: true,
            },
        ],
    };

    fn row(k: &str, tag: &str, body: &str) -> Vec<String> {
        vec![k.into(), tag.into(), body.into()]
    }

    #[test]
    fn put_get_overwrite_delete() {
        let dir = tempfile::tempdir().unwrap();
        let t = Table::open(dir.path(), SCHEMA).unwrap();
        t.put(row("a", "x", "first")).unwrap();
        t.put(row("a", "x", "second")).unwrap();
        assert_eq!(t.get("a").unwrap().unwrap()[2], "second");
        assert_eq!(t.len(), 1);
        assert!(t.delete("a").unwrap());
        assert!(!t.delete("a").unwrap());
        assert!(t.get("a").unwrap().is_none());
    }

    #[test]
    fn arity_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let t = Table::open(dir.path(), SCHEMA).unwrap();
        assert!(matches!(t.put(vec!["a".into()]), Err(TableError::Arity { .. })));
    }

    #[test]
    fn survives_reopen_before_and_after_compaction() {
        let dir = tempfile::tempdir().unwrap();
        let big = "ü€ long text ".repeat(500);
        {
            let t = Table::open(dir.path(), SCHEMA).unwrap();
            t.put(row("k1", "x", &big)).unwrap();
            t.put(row("k2", "y", "short")).unwrap();
        }
        {
            let t = Table::open(dir.path(), SCHEMA).unwrap();
            assert_eq!(t.get("k1").unwrap().unwrap()[2], big);
            let fp = t.compact().unwrap();
            assert_eq!(fp.rows, 2);
            assert!(fp.bytes_on_disk < big.len() as u64, "text column should compress");
            t.put(row("k3", "z", "after compaction")).unwrap();
            t.delete("k2").unwrap();
        }
        let t = Table::open(dir.path(), SCHEMA).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("k1").unwrap().unwrap()[2], big);
        assert_eq!(t.get("k3").unwrap().unwrap()[2], "after compaction");
        assert!(t.get("k2").unwrap().is_none());
    }

    #[test]
    fn torn_log_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        {
            let t = Table::open(dir.path(), SCHEMA).unwrap();
            t.put(row("k1", "x", "kept")).unwrap();
        }
        let log = dir.path().join("t.log");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(&[LOG_PUT, 9, 0, 0, 0, b'p']).unwrap();
        drop(f);
        let t = Table::open(dir.path(), SCHEMA).unwrap();
        assert_eq!(t.len(), 1);
        t.put(row("k2", "x", "new")).unwrap();
        drop(t);
        let t = Table::open(dir.path(), SCHEMA).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn scans() {
        let dir = tempfile::tempdir().unwrap();
        let t = Table::open(dir.path(), SCHEMA).unwrap();
        for (k, tag) in [("b1", "x"), ("a2", "y"), ("a1", "x"), ("c", "x")] {
            t.put(row(k, tag, "body")).unwrap();
        }
        let keys: Vec<_> = t.scan_prefix("a").unwrap().into_iter().map(|r| r[0].clone()).collect();
        assert_eq!(keys, ["a1", "a2"]);
        let keys: Vec<_> = t
            .scan_where(|v| v.get(1) == Some("x"))
            .unwrap()
            .into_iter()
            .map(|r| r[0].clone())
            .collect();
        assert_eq!(keys, ["a1", "b1", "c"]);
    }

    #[test]
    fn segment_columns_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        {
            let t = Table::open(dir.path(), SCHEMA).unwrap();
            t.put(row("k", "x", "b")).unwrap();
            t.compact().unwrap();
        }
        const OTHER: Schema = Schema {
            name: "t",
            columns: &[
                ColumnSpec {
                    name: "key",
                    compressed: false,
                },
                ColumnSpec {
                    name: "body",
                    compressed: true,
                },
            ],
        };
        assert!(matches!(
            Table::open(dir.path(), OTHER),
            Err(TableError::Corrupt { .. })
        ));
    }
}
