//! Track and model files.
//!
//! Track files are plain CSV. The first line is `# I=<n> J=<m>`, optionally
//! followed by `# frames=<id>,<id>,...`, then `2I` rows of `J` values with the x
//! row of each frame before its y row. Values are written with 17 significant
//! digits so a save/load cycle is exact.
//!
//! Model files are a single JSON document holding every matrix of a
//! [`NonRigidModel`] as row-major nested arrays, plus free-form `config` and
//! `diagnostics` sections.
//!
//! Every write goes to a temporary file in the destination directory that is
//! renamed into place once complete.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockMotion, NonRigidModel, RigidFactor, SubspaceSeparation};

/// Writes `contents` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackFile {
    /// `2I × J`.
    pub tracks: DMatrix<f64>,
    pub frame_ids: Option<Vec<String>>,
}

impl TrackFile {
    pub fn new(tracks: DMatrix<f64>) -> TrackFile {
        TrackFile {
            tracks,
            frame_ids: None,
        }
    }

    pub fn image_count(&self) -> usize {
        self.tracks.nrows() / 2
    }

    pub fn point_count(&self) -> usize {
        self.tracks.ncols()
    }

    pub fn parse(text: &str) -> Result<TrackFile> {
        let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l.trim()));
        let (line_no, header) = lines
            .by_ref()
            .find(|(_, l)| !l.is_empty())
            .ok_or(Error::Parse {
                line: 1,
                message: "empty track file".into(),
            })?;
        let (images, points) = parse_header(header).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected header '# I=<n> J=<m>', found '{header}'"),
        })?;
        if images == 0 || points == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "header declares an empty track matrix".into(),
            });
        }

        let mut frame_ids = None;
        let mut values = Vec::with_capacity(2 * images * points);
        let mut rows = 0usize;
        for (line_no, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(ids) = comment.trim().strip_prefix("frames=") {
                    let ids: Vec<String> = ids.split(',').map(|s| s.trim().to_string()).collect();
                    if ids.len() != images {
                        return Err(Error::Parse {
                            line: line_no,
                            message: format!("{} frame ids for {images} images", ids.len()),
                        });
                    }
                    frame_ids = Some(ids);
                }
                continue;
            }
            if rows == 2 * images {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("data row {} exceeds the declared 2I = {}", rows + 1, 2 * images),
                });
            }
            let start = values.len();
            for (col, field) in line.split(',').enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("data row {}, column {}: '{}' is not a number", rows + 1, col + 1, field.trim()),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("data row {}, column {}: non-finite value", rows + 1, col + 1),
                    });
                }
                values.push(v);
            }
            let found = values.len() - start;
            if found != points {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("data row {} has {found} columns, expected J = {points}", rows + 1),
                });
            }
            rows += 1;
        }
        if rows != 2 * images {
            return Err(Error::Parse {
                line: text.lines().count().max(1),
                message: format!("found {rows} data rows, expected 2I = {}", 2 * images),
            });
        }
        Ok(TrackFile {
            tracks: DMatrix::from_row_slice(2 * images, points, &values),
            frame_ids,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# I={} J={}\n", self.image_count(), self.point_count());
        if let Some(ids) = &self.frame_ids {
            let _ = writeln!(out, "# frames={}", ids.join(","));
        }
        out.push_str(&matrix_csv(&self.tracks));
        out
    }

    pub fn load(path: &Path) -> Result<TrackFile> {
        TrackFile::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix('#')?;
    let mut images = None;
    let mut points = None;
    for token in rest.split_whitespace() {
        if let Some(v) = token.strip_prefix("I=") {
            images = v.parse().ok();
        } else if let Some(v) = token.strip_prefix("J=") {
            points = v.parse().ok();
        }
    }
    Some((images?, points?))
}

/// Rows of comma-separated values with 17 significant digits.
pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.nrows() * m.ncols() * 24);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:.16e}", m[(r, c)]);
        }
        out.push('\n');
    }
    out
}

/// Parses comma-separated rows, skipping blank and `#` lines.
pub fn parse_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let start = values.len();
        for field in line.split(',') {
            values.push(field.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("'{}' is not a number", field.trim()),
            })?);
        }
        let width = values.len() - start;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("row has {width} columns, expected {c}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols.unwrap_or(0), &values))
}

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn from_rows(name: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!(
            "{name}: row {bad} has {} entries, expected {ncols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

fn to_rows3(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[(r, c)]))
}

fn from_rows3(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

/// Serialized form of a [`NonRigidModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub images: usize,
    pub points: usize,
    pub subspaces: usize,
    pub m0: Rows,
    pub b0: Rows,
    pub m_isa: Rows,
    pub b_isa: Rows,
    pub transform: Rows,
    pub covariance: Rows,
    pub d: Vec<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_inverse: Option<Vec<[[f64; 3]; 3]>>,
    pub alpha: Rows,
    pub translations: Vec<[f64; 2]>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub diagnostics: serde_json::Value,
}

impl ModelFile {
    pub fn from_model(
        model: &NonRigidModel,
        config: serde_json::Value,
        diagnostics: serde_json::Value,
    ) -> ModelFile {
        ModelFile {
            images: model.image_count(),
            points: model.point_count(),
            subspaces: model.subspaces(),
            m0: to_rows(&model.rigid.motion),
            b0: to_rows(&model.rigid.shape),
            m_isa: to_rows(&model.separation.motion),
            b_isa: to_rows(&model.separation.basis),
            transform: to_rows(&model.separation.transform),
            covariance: to_rows(&model.separation.covariance),
            d: model.blocks.affinities.iter().map(to_rows3).collect(),
            d_inverse: model
                .blocks
                .inverse_affinities
                .as_ref()
                .map(|v| v.iter().map(to_rows3).collect()),
            alpha: to_rows(&model.blocks.alpha),
            translations: model.translations.iter().map(|t| [t.x, t.y]).collect(),
            config,
            diagnostics,
        }
    }

    pub fn to_model(&self) -> Result<NonRigidModel> {
        let model = NonRigidModel {
            rigid: RigidFactor {
                motion: from_rows("m0", &self.m0)?,
                shape: from_rows("b0", &self.b0)?,
            },
            separation: SubspaceSeparation {
                subspaces: self.subspaces,
                transform: from_rows("transform", &self.transform)?,
                motion: from_rows("m_isa", &self.m_isa)?,
                basis: from_rows("b_isa", &self.b_isa)?,
                covariance: from_rows("covariance", &self.covariance)?,
            },
            blocks: BlockMotion {
                affinities: self.d.iter().map(from_rows3).collect(),
                alpha: from_rows("alpha", &self.alpha)?,
                inverse_affinities: self
                    .d_inverse
                    .as_ref()
                    .map(|v| v.iter().map(from_rows3).collect()),
            },
            translations: self.translations.iter().map(|t| Vector2::new(t[0], t[1])).collect(),
        };
        model.validate()?;
        if model.image_count() != self.images
            || model.point_count() != self.points
            || model.subspaces() != self.subspaces
        {
            return Err(Error::Dimension(format!(
                "header declares I={} J={} K={}, arrays give I={} J={} K={}",
                self.images,
                self.points,
                self.subspaces,
                model.image_count(),
                model.point_count(),
                model.subspaces()
            )));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<ModelFile> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        ModelFile::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// Basis shapes around the mean as `B₀ ± ᾱ_k D_k⁻¹ B_k`, with `ᾱ_k` the RMS of
/// `α_k` over frames. Each block is preceded by a `# k=<k> sign=<±>` line and
/// holds 3 rows of `J` coordinates.
pub fn basis_shapes_csv(model: &NonRigidModel) -> Result<String> {
    let frame = model.rigid_frame_basis()?;
    let images = model.image_count().max(1) as f64;
    let mut out = format!("# K={} J={}\n", model.subspaces(), model.point_count());
    for k in 0..model.subspaces() {
        let rms = (model.blocks.alpha.column(k).norm_squared() / images).sqrt();
        let offset = frame.rows(3 * k, 3) * rms;
        for (sign, shape) in [("+", &model.rigid.shape + &offset), ("-", &model.rigid.shape - &offset)] {
            let _ = writeln!(out, "# k={k} sign={sign}");
            out.push_str(&matrix_csv(&shape));
        }
    }
    Ok(out)
}
