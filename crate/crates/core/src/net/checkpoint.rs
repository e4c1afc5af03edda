//! Plain-text network checkpoints.
//!
//! ```text
//! NET v1
//! config <input_dim> <classes> <context_k|0> <context_after>
//! hidden <w1> <w2> ...
//! meta <key> <value>            (zero or more)
//! dense <name> <rows> <cols>
//! <row-major weights, one matrix row per line>
//! <bias values>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{Dense, NetConfig, NetError, PointNetLite};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: PointNetLite,
    /// Free-form string metadata, e.g. the feature mode the net was trained on.
    pub meta: BTreeMap<String, String>,
}

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<(), NetError> {
    let cfg = &ckpt.net.config;
    writeln!(w, "NET v1")?;
    writeln!(
        w,
        "config {} {} {} {}",
        cfg.input_dim,
        cfg.classes,
        cfg.context_k.unwrap_or(0),
        cfg.context_after
    )?;
    let hidden: Vec<String> = cfg.hidden.iter().map(usize::to_string).collect();
    writeln!(w, "hidden {}", hidden.join(" "))?;
    for (k, v) in &ckpt.meta {
        writeln!(w, "meta {k} {v}")?;
    }
    let named = ckpt
        .net
        .encoder
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("encoder.{i}"), d))
        .chain([
            ("class_head".to_string(), &ckpt.net.class_head),
            ("seg_head".to_string(), &ckpt.net.seg_head),
        ]);
    for (name, d) in named {
        let (r, c) = d.weight.dim();
        writeln!(w, "dense {name} {r} {c}")?;
        for row in d.weight.rows() {
            writeln!(w, "{}", join(row.iter().copied()))?;
        }
        writeln!(w, "{}", join(d.bias.iter().copied()))?;
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<Option<String>, NetError> {
        loop {
            match self.inner.next() {
                None => return Ok(None),
                Some(l) => {
                    self.line += 1;
                    let l = l?;
                    if !l.trim().is_empty() {
                        return Ok(Some(l));
                    }
                }
            }
        }
    }

    fn err(&self, reason: impl Into<String>) -> NetError {
        NetError::Checkpoint {
            line: self.line,
            reason: reason.into(),
        }
    }

    fn expect(&mut self) -> Result<String, NetError> {
        self.next()?.ok_or_else(|| self.err("unexpected end of checkpoint"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>, NetError> {
        let l = self.expect()?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| self.err(format!("bad number: {e}")))?;
        if v.len() != n {
            return Err(self.err(format!("expected {n} values, found {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(self.err("non-finite parameter"));
        }
        Ok(v)
    }
}

fn parse_usizes<R: BufRead>(lines: &Lines<R>, fields: &[&str]) -> Result<Vec<usize>, NetError> {
    fields
        .iter()
        .map(|f| f.parse().map_err(|_| lines.err(format!("bad integer {f:?}"))))
        .collect()
}

pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<Checkpoint, NetError> {
    let mut lines = Lines {
        inner: reader.lines(),
        line: 0,
    };
    if lines.expect()?.trim() != "NET v1" {
        return Err(lines.err("missing NET v1 header"));
    }
    let cfg_line = lines.expect()?;
    let f: Vec<&str> = cfg_line.split_whitespace().collect();
    if f.len() != 5 || f[0] != "config" {
        return Err(lines.err("expected config record"));
    }
    let v = parse_usizes(&lines, &f[1..])?;
    let hidden_line = lines.expect()?;
    let f: Vec<&str> = hidden_line.split_whitespace().collect();
    if f.first() != Some(&"hidden") {
        return Err(lines.err("expected hidden record"));
    }
    let hidden = parse_usizes(&lines, &f[1..])?;
    let config = NetConfig {
        input_dim: v[0],
        classes: v[1],
        context_k: (v[2] > 0).then_some(v[2]),
        context_after: v[3],
        hidden,
    };
    let mut net = PointNetLite::zeros(config).map_err(|e| lines.err(e.to_string()))?;
    let mut meta = BTreeMap::new();
    let mut pending = lines.next()?;
    while let Some(l) = pending.as_deref() {
        let Some(rest) = l.strip_prefix("meta ") else { break };
        let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
        meta.insert(k.to_string(), v.to_string());
        pending = lines.next()?;
    }
    let count = net.encoder.len() + 2;
    for idx in 0..count {
        let header = match pending.take() {
            Some(h) => h,
            None => lines.expect()?,
        };
        let f: Vec<&str> = header.split_whitespace().collect();
        let name = if idx < net.encoder.len() {
            format!("encoder.{idx}")
        } else if idx == net.encoder.len() {
            "class_head".into()
        } else {
            "seg_head".into()
        };
        if f.len() != 4 || f[0] != "dense" || f[1] != name {
            return Err(lines.err(format!("expected dense {name}")));
        }
        let shape = parse_usizes(&lines, &f[2..])?;
        let target: &mut Dense = if idx < net.encoder.len() {
            &mut net.encoder[idx]
        } else if idx == net.encoder.len() {
            &mut net.class_head
        } else {
            &mut net.seg_head
        };
        if (shape[0], shape[1]) != target.weight.dim() {
            return Err(lines.err(format!(
                "shape {}x{} does not match configuration {:?}",
                shape[0],
                shape[1],
                target.weight.dim()
            )));
        }
        for r in 0..shape[0] {
            let row = lines.floats(shape[1])?;
            for (c, x) in row.into_iter().enumerate() {
                target.weight[[r, c]] = x;
            }
        }
        let bias = lines.floats(shape[1])?;
        target.bias = bias.into();
    }
    if lines.next()?.is_some() {
        return Err(lines.err("trailing data after last layer"));
    }
    Ok(Checkpoint { net, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let net = PointNetLite::new(NetConfig::default(), 11).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("features".to_string(), "xyz".to_string());
        let ckpt = Checkpoint { net, meta };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, ckpt);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let ckpt = Checkpoint {
            net: PointNetLite::new(NetConfig::default(), 1).unwrap(),
            meta: BTreeMap::new(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(matches!(read_checkpoint(cut.as_bytes()), Err(NetError::Checkpoint { .. })));
    }
}
