//! Model persistence.
//!
//! ```text
//! #cohesion-svr v1 kernel=rbf gamma=<g> bias=<b> dim=<D> nsv=<K>
//! <standardizer mean, D values>
//! <standardizer scale, D values>
//! <beta>\t<v1> ... <vD>          (K lines)
//! ```
//!
//! Linear models write `gamma=-`.

use std::io::{BufRead, Write};
use std::path::Path;

use super::{KernelKind, KernelSpec, SvrModel};
use crate::error::{Error, Result};
use crate::feature_store::Standardizer;
use crate::numfmt;

pub const MODEL_MAGIC: &str = "#cohesion-svr";

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| numfmt::full(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_model<W: Write>(mut out: W, m: &SvrModel) -> Result<()> {
    let io = |e| Error::io("<model output>", e);
    let gamma = m
        .kernel
        .gamma()
        .map_or_else(|| "-".to_string(), numfmt::full);
    writeln!(
        out,
        "{MODEL_MAGIC} v1 kernel={} gamma={gamma} bias={} dim={} nsv={}",
        m.kernel.kind(),
        numfmt::full(m.bias),
        m.dim(),
        m.dual_coefs.len()
    )
    .map_err(io)?;
    writeln!(out, "{}", join(m.standardizer.mean())).map_err(io)?;
    writeln!(out, "{}", join(m.standardizer.scale())).map_err(io)?;
    for (b, sv) in m.dual_coefs.iter().zip(&m.support_vectors) {
        writeln!(out, "{}\t{}", numfmt::full(*b), join(sv)).map_err(io)?;
    }
    Ok(())
}

fn header_field<'a>(fields: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    fields
        .next()
        .and_then(|f| f.strip_prefix(key))
        .and_then(|f| f.strip_prefix('='))
        .ok_or_else(|| Error::HeaderMismatch(format!("model header missing `{key}=`")))
}

fn parse_values(line: &str, lineno: usize, dim: usize) -> Result<Vec<f64>> {
    let values = line
        .split_ascii_whitespace()
        .map(|t| {
            numfmt::parse_finite(t)
                .ok_or_else(|| Error::malformed(lineno, format!("bad value `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != dim {
        return Err(Error::malformed(
            lineno,
            format!("expected {dim} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

pub fn parse_model<R: BufRead>(reader: R) -> Result<SvrModel> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| {
        l.map(|s| (i + 1, s.trim_end_matches('\r').to_string()))
            .map_err(|e| Error::malformed(i + 1, e.to_string()))
    });
    let (_, header) = lines.next().ok_or(Error::EmptyFile)??;

    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some(MODEL_MAGIC) || fields.next() != Some("v1") {
        return Err(Error::HeaderMismatch(format!(
            "not a model header: `{header}`"
        )));
    }
    let kind: KernelKind = header_field(&mut fields, "kernel")?.parse()?;
    let gamma = header_field(&mut fields, "gamma")?;
    let kernel = match kind {
        KernelKind::Linear => KernelSpec::Linear,
        KernelKind::Rbf => KernelSpec::rbf(
            numfmt::parse_finite(gamma).ok_or_else(|| Error::HeaderMismatch("bad gamma".into()))?,
        )?,
    };
    let bias = numfmt::parse_finite(header_field(&mut fields, "bias")?)
        .ok_or_else(|| Error::HeaderMismatch("bad bias".into()))?;
    let dim: usize = header_field(&mut fields, "dim")?
        .parse()
        .map_err(|_| Error::HeaderMismatch("bad dim".into()))?;
    let nsv: usize = header_field(&mut fields, "nsv")?
        .parse()
        .map_err(|_| Error::HeaderMismatch("bad nsv".into()))?;

    let mut next_line = |what: &str| {
        lines.next().unwrap_or_else(|| {
            Err(Error::malformed(
                0,
                format!("truncated model: missing {what}"),
            ))
        })
    };
    let (ln, mean_line) = next_line("standardizer mean")?;
    let mean = parse_values(&mean_line, ln, dim)?;
    let (ln, scale_line) = next_line("standardizer scale")?;
    let scale = parse_values(&scale_line, ln, dim)?;
    let standardizer = Standardizer::from_parts(mean, scale)?;

    let mut support_vectors = Vec::with_capacity(nsv);
    let mut dual_coefs = Vec::with_capacity(nsv);
    for _ in 0..nsv {
        let (ln, line) = next_line("support vector")?;
        let (beta, values) = line
            .split_once('\t')
            .ok_or_else(|| Error::malformed(ln, "expected `<beta>\\t<values>`"))?;
        dual_coefs.push(
            numfmt::parse_finite(beta)
                .ok_or_else(|| Error::malformed(ln, format!("bad beta `{beta}`")))?,
        );
        support_vectors.push(parse_values(values, ln, dim)?);
    }
    if let Some(extra) = lines.next() {
        let (ln, _) = extra?;
        return Err(Error::malformed(ln, "unexpected trailing line"));
    }
    Ok(SvrModel {
        kernel,
        support_vectors,
        dual_coefs,
        bias,
        standardizer,
    })
}

pub fn read_model(path: &Path) -> Result<SvrModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_model(std::io::BufReader::new(file))
}
