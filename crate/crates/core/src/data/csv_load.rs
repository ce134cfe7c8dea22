use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Task};
use crate::error::{Result, TdaError};

/// Maps named CSV columns onto features and a target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub target: String,
    pub task: Task,
    /// Standardize features and, for regression, the target.
    #[serde(default)]
    pub standardize: bool,
}

/// Loads a headered, comma-separated UTF-8 table. Row numbers in errors are
/// 1-based and count the header as row 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| TdaError::Parse {
            row: 1,
            column: name.to_string(),
            message: "missing column".into(),
        })
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column(f))
        .collect::<Result<Vec<_>>>()?;
    let target_col = column(&schema.target)?;

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| TdaError::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| TdaError::Parse {
                    row,
                    column: name.to_string(),
                    message: format!("non-numeric cell '{raw}'"),
                })
        };
        xs.push(
            feature_cols
                .iter()
                .zip(&schema.features)
                .map(|(&c, name)| cell(c, name))
                .collect::<Result<Vec<_>>>()?,
        );
        ys.push(cell(target_col, &schema.target)?);
    }
    if xs.is_empty() {
        return Err(TdaError::Parse {
            row: 2,
            column: String::new(),
            message: "file has no data rows".into(),
        });
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    let mut ds = Dataset::new(name, schema.task, xs, ys, None)?;
    if schema.standardize {
        ds.standardize(true);
    }
    Ok(ds)
}

fn csv_error(path: &Path, e: csv::Error) -> TdaError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TdaError::io(path, io),
        other => TdaError::Parse {
            row: 1,
            column: String::new(),
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema(standardize: bool) -> CsvSchema {
        CsvSchema {
            features: vec!["a".into(), "b".into()],
            target: "y".into(),
            task: Task::Regression,
            standardize,
        }
    }

    #[test]
    fn loads_and_standardizes() {
        let f = write("a,b,y\n1,10,0.5\n2,20,1.5\n3,30,2.5\n");
        let ds = load_csv(f.path(), &schema(false)).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 2));

        let ds = load_csv(f.path(), &schema(true)).unwrap();
        let col: Vec<f64> = ds.features().iter().map(|r| r[0]).collect();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in col.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(col.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn reports_positions() {
        let f = write("a,b,y\n1,2,3\n4,x,6\n");
        match load_csv(f.path(), &schema(false)).unwrap_err() {
            TdaError::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (3, "b")),
            e => panic!("{e}"),
        }
        let f = write("a,y\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), &schema(false)),
            Err(TdaError::Parse { column, .. }) if column == "b"
        ));
        let f = write("a,b,y\n");
        assert!(matches!(load_csv(f.path(), &schema(false)), Err(TdaError::Parse { .. })));
        assert!(load_csv("/nonexistent/file.csv", &schema(false)).unwrap_err().is_io());
    }
}
