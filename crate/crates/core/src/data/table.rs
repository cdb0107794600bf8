//! CSV datasets: header `label,f0,f1,...`, one example per row.

use std::path::Path;

use super::Dataset;
use crate::{Error, Result};

fn position_of(pos: Option<&csv::Position>) -> String {
    pos.map_or_else(
        || "unknown position".into(),
        |p| format!("line {}, byte {}", p.line(), p.byte()),
    )
}

/// Examples are flat vectors of shape `[features]`; the class count is `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let err = |pos: Option<&csv::Position>, msg: String| Error::Format {
        path: path.display().to_string(),
        position: position_of(pos),
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            k => err(None, format!("{k:?}")),
        })?;
    let header = rdr.headers().map_err(|e| err(e.position(), e.to_string()))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(err(None, "empty file".into()));
    }
    if &header[0] != "label" || header.len() < 2 {
        return Err(err(
            header.position(),
            format!(
                "header must be `label,feature...`, got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let nf = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position(), e.to_string()))?;
        let label = rec[0]
            .parse::<usize>()
            .map_err(|_| err(rec.position(), format!("label `{}` is not a class index", &rec[0])))?;
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v = field
                .parse::<f32>()
                .map_err(|_| err(rec.position(), format!("feature {j} `{field}` is not a number")))?;
            features.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(err(None, "no examples".into()));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(features, vec![nf], labels, classes)
}

/// Writes flattened examples; values use the shortest round-tripping decimal form.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let f = data.feature_len();
    let mut header = vec!["label".to_string()];
    header.extend((0..f).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(io)?;
    for i in 0..data.len() {
        let mut row = vec![data.labels[i].to_string()];
        row.extend(data.example(i).iter().map(f32::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthKind};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = synth_generate(SynthKind::TwoMoonsLike, 33, 2).unwrap();
        write_csv(&d, &p).unwrap();
        assert_eq!(load_csv(&p).unwrap(), d);
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "").unwrap();
        assert!(load_csv(&p).is_err());
        std::fs::write(&p, "label,f0\n").unwrap();
        assert!(load_csv(&p).is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "label,f0,f1\n0,1.0,2.0\n1,oops,3\n").unwrap();
        let e = load_csv(&p).unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("oops"), "{e}");
        std::fs::write(&p, "label,f0,f1\n0,1.0\n").unwrap();
        let e = load_csv(&p).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        std::fs::write(&p, "y,f0\n0,1\n").unwrap();
        assert!(load_csv(&p).unwrap_err().to_string().contains("header"));
    }
}
