//! Plain-text model dumps.
//!
//! ```text
//! fedrec-checkpoint 1
//! family mf
//! link sigmoid
//! dim 32
//! widths 64 32 16 8     (DL only: tower input and hidden widths)
//! seed 7
//! tensor items 1682 32
//! <one row per line, values in `{:.17e}`>
//! tensor W1 32 64
//! ...
//! ```
//! Every value is written with enough digits to round-trip exactly, so equal
//! models produce byte-identical files.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{GlobalModel, MfLink, Mlp, ModelFamily};

const MAGIC: &str = "fedrec-checkpoint 1";

fn write_tensor(out: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    let _ = writeln!(out, "tensor {name} {rows} {cols}");
    for row in data.chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

pub fn to_text(model: &GlobalModel, seed: u64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let family = match model.family {
        ModelFamily::Mf => "mf",
        ModelFamily::Dl => "dl",
    };
    let link = match model.mf_link {
        MfLink::Sigmoid => "sigmoid",
        MfLink::RawClamped => "raw_clamped",
    };
    let _ = writeln!(out, "family {family}");
    let _ = writeln!(out, "link {link}");
    let _ = writeln!(out, "dim {}", model.dim);
    if let Some(mlp) = &model.mlp {
        let widths: Vec<String> = mlp.widths().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "widths {}", widths.join(" "));
    }
    let _ = writeln!(out, "seed {seed}");
    write_tensor(
        &mut out,
        "items",
        model.num_items,
        model.dim,
        &model.item_embeddings,
    );
    if let Some(mlp) = &model.mlp {
        for (l, layer) in mlp.layers.iter().enumerate() {
            write_tensor(
                &mut out,
                &format!("W{}", l + 1),
                layer.outputs,
                layer.inputs,
                &layer.weight,
            );
            write_tensor(
                &mut out,
                &format!("b{}", l + 1),
                1,
                layer.outputs,
                &layer.bias,
            );
        }
        write_tensor(&mut out, "h", 1, mlp.projection.len(), &mlp.projection);
    }
    out
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.lines
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or(Error::Parse {
                line: 0,
                message: "unexpected end of checkpoint".into(),
            })
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, text) = self.next()?;
        let mut parts = text.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::Parse {
                line,
                message: format!("expected `{key}`"),
            });
        }
        Ok((line, parts.collect()))
    }

    fn tensor(&mut self, name: &str) -> Result<Vec<f64>> {
        let (line, args) = self.keyed("tensor")?;
        let bad = |message: String| Error::Parse { line, message };
        if args.len() != 3 || args[0] != name {
            return Err(bad(format!("expected tensor {name}")));
        }
        let rows: usize = args[1].parse().map_err(|_| bad("bad row count".into()))?;
        let cols: usize = args[2]
            .parse()
            .map_err(|_| bad("bad column count".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (line, text) = self.next()?;
            for v in text.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad value {v:?}"),
                })?);
            }
        }
        if data.len() != rows * cols {
            return Err(bad(format!(
                "tensor {name} has {} values, expected {}",
                data.len(),
                rows * cols
            )));
        }
        Ok(data)
    }
}

fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("expected integer, found {s:?}"),
    })
}

/// Parses a dump written by [`to_text`]; returns the model and its seed.
pub fn from_text(text: &str) -> Result<(GlobalModel, u64)> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
    };
    let (line, magic) = r.next()?;
    if magic.trim() != MAGIC {
        return Err(Error::Parse {
            line,
            message: "not a fedrec checkpoint".into(),
        });
    }
    let (line, fam) = r.keyed("family")?;
    let family = match fam.first().copied() {
        Some("mf") => ModelFamily::Mf,
        Some("dl") => ModelFamily::Dl,
        _ => {
            return Err(Error::Parse {
                line,
                message: "unknown family".into(),
            })
        }
    };
    let (line, link) = r.keyed("link")?;
    let mf_link = match link.first().copied() {
        Some("sigmoid") => MfLink::Sigmoid,
        Some("raw_clamped") => MfLink::RawClamped,
        _ => {
            return Err(Error::Parse {
                line,
                message: "unknown link".into(),
            })
        }
    };
    let (line, dim) = r.keyed("dim")?;
    let dim = parse_usize(line, dim.first().copied().unwrap_or(""))?;
    let widths = if family == ModelFamily::Dl {
        let (line, w) = r.keyed("widths")?;
        w.iter()
            .map(|s| parse_usize(line, s))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let (line, seed) = r.keyed("seed")?;
    let seed: u64 = seed
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or(Error::Parse {
            line,
            message: "bad seed".into(),
        })?;
    let item_embeddings = r.tensor("items")?;
    let num_items = item_embeddings.len().checked_div(dim).unwrap_or(0);
    let mlp = if family == ModelFamily::Dl {
        let mut mlp = Mlp::zeros(widths[0], &widths[1..]);
        for l in 0..mlp.layers.len() {
            mlp.layers[l].weight = r.tensor(&format!("W{}", l + 1))?;
            mlp.layers[l].bias = r.tensor(&format!("b{}", l + 1))?;
        }
        mlp.projection = r.tensor("h")?;
        Some(mlp)
    } else {
        None
    };
    Ok((
        GlobalModel {
            family,
            mf_link,
            dim,
            num_items,
            item_embeddings,
            mlp,
        },
        seed,
    ))
}
