//! Plain-text checkpoint archive for [`MiniDetector`].
//!
//! A checkpoint is a self-describing UTF-8 file: a header of `key = value`
//! lines fixing the architecture, followed by one block per parameter and
//! per batch-norm buffer. Values are printed with Rust's shortest
//! round-trip `f64` formatting, so save → load → save reproduces the file
//! byte for byte and a reloaded network computes bit-identical outputs.
//!
//! ```text
//! format = dhif-checkpoint-v1
//! in_ch = 1
//! channels = 8 16 32
//! kernel_size = 3
//! dhif_levels = 2 3
//! nonlinearity = tanh
//! block_order = dhif_first
//!
//! tensor enc1.conv1.weight 2 8 9
//! 0.0125 -0.33 ...            (one line per leading-dimension slice)
//! ...
//! buffer enc1.bn1.running_mean 1 8
//! 0 0 0 0 0 0 0 0
//! ```
//!
//! `tensor` blocks are trainable parameters, `buffer` blocks are running
//! statistics; the loader refuses a file whose blocks do not match the
//! architecture in the header exactly (missing, extra, misshapen or
//! misclassified blocks are all parse errors).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::blocks::BlockOrder;
use crate::error::{Error, Result};
use crate::net::{MiniDetector, NetConfig};
use crate::ops::Activation;
use crate::tensor::Tensor;

const FORMAT_TAG: &str = "dhif-checkpoint-v1";

/// Render a detector (architecture, parameters, buffers) to the archive
/// format.
pub fn detector_to_string(net: &MiniDetector) -> String {
    let cfg = net.config();
    let mut out = String::new();
    let _ = writeln!(out, "format = {FORMAT_TAG}");
    let _ = writeln!(out, "in_ch = {}", cfg.in_ch);
    let _ = writeln!(out, "channels = {}", join_usizes(cfg.channels.iter()));
    let _ = writeln!(out, "kernel_size = {}", cfg.kernel_size);
    let _ = writeln!(out, "dhif_levels = {}", join_usizes(cfg.dhif_levels.iter()));
    let _ = writeln!(out, "nonlinearity = {}", cfg.nonlinearity.name());
    let _ = writeln!(out, "block_order = {}", cfg.block_order.name());
    let _ = writeln!(out);
    net.for_each_param(&mut |name, tensor| {
        write_block(&mut out, "tensor", &name, tensor);
    });
    net.for_each_buffer(&mut |name, tensor| {
        write_block(&mut out, "buffer", &name, tensor);
    });
    out
}

/// Save a detector to `path` in the archive format.
pub fn save_detector(net: &MiniDetector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, detector_to_string(net)).map_err(|e| Error::io(path, e))
}

/// Load a detector from `path`.
pub fn load_detector(path: impl AsRef<Path>) -> Result<MiniDetector> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detector_from_str(&text, &path.display().to_string())
}

fn join_usizes<'a>(values: impl Iterator<Item = &'a usize>) -> String {
    values.map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn write_block(out: &mut String, kind: &str, name: &str, tensor: &Tensor) {
    let dims = tensor
        .shape()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    let _ = writeln!(out, "{kind} {name} {} {dims}", tensor.shape().len());
    let row_len = tensor.len() / tensor.shape()[0];
    for row in tensor.data().chunks_exact(row_len) {
        let mut line = String::with_capacity(row.len() * 12);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{v}");
        }
        out.push_str(&line);
        out.push('\n');
    }
}

struct Block {
    kind: BlockKind,
    tensor: Tensor,
    line: usize,
    used: bool,
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum BlockKind {
    Tensor,
    Buffer,
}

impl BlockKind {
    fn label(self) -> &'static str {
        match self {
            BlockKind::Tensor => "tensor",
            BlockKind::Buffer => "buffer",
        }
    }
}

/// Parse the archive format; `origin` names the source in errors (a file
/// path, or a pseudo-name for in-memory text).
pub fn detector_from_str(text: &str, origin: &str) -> Result<MiniDetector> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate().peekable();

    // Header: `key = value` lines up to the first blank line.
    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, line) in lines.by_ref() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            break;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim().to_string();
        if header
            .insert(key.clone(), (line_no, value.trim().to_string()))
            .is_some()
        {
            return Err(parse_err(line_no, format!("duplicate header key {key:?}")));
        }
    }

    let mut take = |key: &str| -> Result<(usize, String)> {
        header
            .remove(key)
            .ok_or_else(|| parse_err(1, format!("missing header key {key:?}")))
    };

    let (line_no, format) = take("format")?;
    if format != FORMAT_TAG {
        return Err(parse_err(
            line_no,
            format!("unsupported format {format:?} (expected {FORMAT_TAG:?})"),
        ));
    }
    let (line_no, in_ch) = take("in_ch")?;
    let in_ch: usize = in_ch
        .parse()
        .map_err(|_| parse_err(line_no, format!("in_ch is not a count: {in_ch:?}")))?;
    let (line_no, channels) = take("channels")?;
    let channels = parse_usizes(&channels)
        .map_err(|bad| parse_err(line_no, format!("bad channel width {bad:?}")))?;
    let (line_no, kernel_size) = take("kernel_size")?;
    let kernel_size: usize = kernel_size
        .parse()
        .map_err(|_| parse_err(line_no, format!("kernel_size is not a count: {kernel_size:?}")))?;
    let (line_no, levels) = take("dhif_levels")?;
    let dhif_levels = parse_usizes(&levels)
        .map_err(|bad| parse_err(line_no, format!("bad dhif level {bad:?}")))?
        .into_iter()
        .collect();
    let (line_no, nonlinearity) = take("nonlinearity")?;
    let nonlinearity = Activation::parse(&nonlinearity)
        .map_err(|e| parse_err(line_no, e.to_string()))?;
    let (line_no, block_order) = take("block_order")?;
    let block_order =
        BlockOrder::parse(&block_order).map_err(|e| parse_err(line_no, e.to_string()))?;
    if let Some((key, (line_no, _))) = header.into_iter().next() {
        return Err(parse_err(line_no, format!("unknown header key {key:?}")));
    }

    let config = NetConfig {
        in_ch,
        channels,
        kernel_size,
        dhif_levels,
        nonlinearity,
        block_order,
    };
    let mut net =
        MiniDetector::new(config).map_err(|e| parse_err(1, format!("bad architecture: {e}")))?;

    // Blocks: `tensor|buffer <name> <rank> <dims...>` + one line per row.
    let mut blocks: BTreeMap<String, Block> = BTreeMap::new();
    while let Some((idx, line)) = lines.next() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let kind = match fields[0] {
            "tensor" => BlockKind::Tensor,
            "buffer" => BlockKind::Buffer,
            other => {
                return Err(parse_err(
                    line_no,
                    format!("expected a tensor or buffer block, got {other:?}"),
                ))
            }
        };
        if fields.len() < 3 {
            return Err(parse_err(line_no, format!("truncated block header {line:?}")));
        }
        let name = fields[1].to_string();
        let rank: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad rank {:?}", fields[2])))?;
        if fields.len() != 3 + rank || rank == 0 {
            return Err(parse_err(
                line_no,
                format!("rank {rank} block needs {rank} dimensions, got {:?}", &fields[3..]),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for dim in &fields[3..] {
            let d: usize = dim
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad dimension {dim:?}")))?;
            shape.push(d);
        }
        let rows = shape[0];
        let row_len: usize = shape[1..].iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(rows * row_len);
        for _ in 0..rows {
            let (idx, row_line) = lines
                .next()
                .ok_or_else(|| parse_err(line_no, format!("{name}: file ends mid-block")))?;
            let row_no = idx + 1;
            let mut count = 0usize;
            for field in row_line.split_whitespace() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(row_no, format!("{name}: bad value {field:?}")))?;
                data.push(v);
                count += 1;
            }
            if count != row_len {
                return Err(parse_err(
                    row_no,
                    format!("{name}: expected {row_len} values per row, got {count}"),
                ));
            }
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| parse_err(line_no, format!("{name}: {e}")))?;
        if blocks
            .insert(
                name.clone(),
                Block {
                    kind,
                    tensor,
                    line: line_no,
                    used: false,
                },
            )
            .is_some()
        {
            return Err(parse_err(line_no, format!("duplicate block {name:?}")));
        }
    }

    // Route blocks into the network; every slot must be filled by a block of
    // the right kind and shape, and no block may be left over.
    let mut failure: Option<Error> = None;
    let mut fill = |name: String, dst: &mut Tensor, want: BlockKind| {
        if failure.is_some() {
            return;
        }
        match blocks.get_mut(&name) {
            None => {
                failure = Some(parse_err(1, format!("missing {} {name:?}", want.label())));
            }
            Some(block) => {
                if block.kind != want {
                    failure = Some(parse_err(
                        block.line,
                        format!("{name:?} is declared {}, expected {}", block.kind.label(), want.label()),
                    ));
                } else if block.tensor.shape() != dst.shape() {
                    failure = Some(parse_err(
                        block.line,
                        format!(
                            "{name:?} has shape {:?}, architecture wants {:?}",
                            block.tensor.shape(),
                            dst.shape()
                        ),
                    ));
                } else {
                    *dst = block.tensor.clone();
                    block.used = true;
                }
            }
        }
    };
    net.for_each_param_mut(&mut |name, tensor| fill(name, tensor, BlockKind::Tensor));
    net.for_each_buffer_mut(&mut |name, tensor| fill(name, tensor, BlockKind::Buffer));
    if let Some(err) = failure {
        return Err(err);
    }
    if let Some((name, block)) = blocks.iter().find(|(_, b)| !b.used) {
        return Err(parse_err(
            block.line,
            format!("block {name:?} does not correspond to any architecture slot"),
        ));
    }
    Ok(net)
}

fn parse_usizes(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split_whitespace()
        .map(|f| f.parse::<usize>().map_err(|_| f.to_string()))
        .collect()
}
