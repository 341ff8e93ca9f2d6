//! `GRADNET v1` files.
//!
//! ```text
//! GRADNET v1
//! # input 1 16 16          (optional comment-style metadata lines)
//! # seed 42
//! stem.weight 32 256
//! <32*256 little-endian f32 values>
//! stem.bias 32
//! <...>
//! ```
//!
//! The same record stream stores memory snapshot arrays and raw dataset
//! samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::gradnet::network::{Block, Dense, Layout, Network};

pub const MAGIC: &str = "GRADNET v1";

/// Writes a record stream: header, metadata lines, then named arrays.
pub struct RecordWriter<W: Write> {
    inner: W,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut inner: W, meta: &[(&str, String)]) -> Result<Self> {
        writeln!(inner, "{MAGIC}")?;
        for (k, v) in meta {
            writeln!(inner, "# {k} {v}")?;
        }
        Ok(Self { inner })
    }

    pub fn record(&mut self, name: &str, arr: &Array) -> Result<()> {
        if name.is_empty() || name.contains(char::is_whitespace) || name.starts_with('#') {
            return Err(Error::format("record", format!("invalid record name {name:?}")));
        }
        write!(self.inner, "{name}")?;
        for d in arr.shape() {
            write!(self.inner, " {d}")?;
        }
        writeln!(self.inner)?;
        let mut bytes = Vec::with_capacity(arr.len() * 4);
        for v in arr.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&bytes)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Parsed record stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Records {
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Array)>,
}

impl Records {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

fn read_line<R: BufRead>(r: &mut R) -> Result<Option<String>> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
    }
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| Error::format("record", "header line is not utf-8"))
}

pub fn read_records<R: Read>(reader: R) -> Result<Records> {
    let mut r = BufReader::new(reader);
    match read_line(&mut r)? {
        Some(l) if l == MAGIC => {}
        other => {
            return Err(Error::format(
                "record",
                format!("expected {MAGIC:?} header, found {other:?}"),
            ))
        }
    }
    let mut meta = Vec::new();
    let mut arrays = Vec::new();
    while let Some(line) = read_line(&mut r)? {
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.push((k.to_string(), v.to_string()));
            continue;
        }
        let mut parts = line.split(' ');
        let name = parts
            .next()
            .filter(|n| !n.is_empty())
            .ok_or_else(|| Error::format("record", "empty record header"))?
            .to_string();
        let shape = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::format("record", format!("bad extent {p:?} in {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::format("record", format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push((name, Array::new(shape, data)?));
    }
    Ok(Records { meta, arrays })
}

pub fn write_network<W: Write>(net: &Network, w: W) -> Result<W> {
    let input = net
        .input_shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let mut rw = RecordWriter::new(
        w,
        &[("input", input), ("seed", net.rng_seed().to_string())],
    )?;
    for (name, arr) in net.params() {
        rw.record(&name, arr)?;
    }
    rw.finish()
}

fn next_record(
    arrays: &mut impl Iterator<Item = (String, Array)>,
    expect: &str,
) -> Result<Array> {
    match arrays.next() {
        Some((name, arr)) if name == expect => Ok(arr),
        Some((name, _)) => Err(Error::format(
            "checkpoint",
            format!("expected {expect}, found {name}"),
        )),
        None => Err(Error::format("checkpoint", format!("missing {expect}"))),
    }
}

pub fn read_network<R: Read>(r: R) -> Result<Network> {
    let recs = read_records(r)?;
    let input_shape = recs
        .meta("input")
        .ok_or_else(|| Error::format("checkpoint", "missing input metadata"))?
        .split(' ')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::format("checkpoint", format!("bad input extent {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = recs
        .meta("seed")
        .unwrap_or("0")
        .parse::<u64>()
        .map_err(|_| Error::format("checkpoint", "bad seed"))?;

    let mut arrays = recs.arrays.into_iter();
    let stem = Dense {
        weight: next_record(&mut arrays, "stem.weight")?,
        bias: next_record(&mut arrays, "stem.bias")?,
    };
    let width = stem.outputs();
    let mut blocks = Vec::new();
    let head;
    loop {
        let i = blocks.len();
        let prefix = format!("blocks.{i}.fc1.weight");
        match arrays.next() {
            Some((name, w1)) if name == prefix => {
                let b1 = next_record(&mut arrays, &format!("blocks.{i}.fc1.bias"))?;
                let w2 = next_record(&mut arrays, &format!("blocks.{i}.fc2.weight"))?;
                let b2 = next_record(&mut arrays, &format!("blocks.{i}.fc2.bias"))?;
                blocks.push(Block {
                    fc1: Dense {
                        weight: w1,
                        bias: b1,
                    },
                    fc2: Dense {
                        weight: w2,
                        bias: b2,
                    },
                });
            }
            Some((name, hw)) if name == "head.weight" => {
                head = Dense {
                    weight: hw,
                    bias: next_record(&mut arrays, "head.bias")?,
                };
                break;
            }
            Some((name, _)) => {
                return Err(Error::format(
                    "checkpoint",
                    format!("unexpected record {name}"),
                ))
            }
            None => return Err(Error::format("checkpoint", "missing head.weight")),
        }
    }
    if arrays.next().is_some() {
        return Err(Error::format("checkpoint", "trailing records after head"));
    }
    let layout = Layout::new(&input_shape, width, blocks.len(), head.outputs());
    Network::from_parts(layout, stem, blocks, head, seed)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    write_network(net, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    read_network(File::open(path)?)
}
