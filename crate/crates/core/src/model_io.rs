//! Binary model container.
//!
//! Self-describing layout: magic `SVBE`, a version byte, a model type tag,
//! then the payload. Vectors are `u32` length + little-endian `f64` values;
//! matrices are `u32` rows, `u32` cols, then row-major `f64` values. The
//! round trip is bit-exact.
//!
//! Type tags: 0 = generative PLDA (preprocessor + covariances), 1 = neural
//! PLDA (all trainables plus the alpha/beta hyperparameters).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gplda::GPLDAModel;
use crate::nplda::NPLDAModel;
use crate::preprocess::Preprocessor;

const MAGIC: &[u8; 4] = b"SVBE";
const VERSION: u8 = 1;
const TAG_GPLDA: u8 = 0;
const TAG_NPLDA: u8 = 1;

/// Either back-end model, as stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gplda(GPLDAModel),
    Nplda(NPLDAModel),
}

impl Model {
    pub fn type_name(&self) -> &'static str {
        match self {
            Model::Gplda(_) => "gplda",
            Model::Nplda(_) => "nplda",
        }
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Writer<'a, W: Write> {
    w: W,
    path: &'a Path,
}

impl<'a, W: Write> Writer<'a, W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b).map_err(|e| Error::io(self.path, e))
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn vector(&mut self, v: &DVector<f64>) -> Result<()> {
        self.u32(v.len() as u32)?;
        for x in v.iter() {
            self.f64(*x)?;
        }
        Ok(())
    }

    fn matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        self.u32(m.nrows() as u32)?;
        self.u32(m.ncols() as u32)?;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)])?;
            }
        }
        Ok(())
    }
}

struct Reader<'a, R: Read> {
    r: R,
    path: &'a Path,
}

impl<'a, R: Read> Reader<'a, R> {
    fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.r
            .read_exact(buf)
            .map_err(|_| fmt_err(self.path, format!("truncated while reading {what}")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn vector(&mut self, what: &str) -> Result<DVector<f64>> {
        let n = self.u32(what)? as usize;
        let mut v = DVector::zeros(n);
        for i in 0..n {
            v[i] = self.f64(what)?;
        }
        Ok(v)
    }

    fn matrix(&mut self, what: &str) -> Result<DMatrix<f64>> {
        let rows = self.u32(what)? as usize;
        let cols = self.u32(what)? as usize;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.f64(what)?;
            }
        }
        Ok(m)
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = Writer {
        w: BufWriter::new(file),
        path,
    };
    w.bytes(MAGIC)?;
    w.bytes(&[VERSION])?;
    match model {
        Model::Gplda(m) => {
            w.bytes(&[TAG_GPLDA])?;
            let pre = m.preprocessor();
            w.vector(pre.mean())?;
            w.matrix(pre.lda())?;
            w.matrix(pre.diag_transform())?;
            w.matrix(m.phi())?;
            w.matrix(m.sigma_wc())?;
        }
        Model::Nplda(m) => {
            w.bytes(&[TAG_NPLDA])?;
            w.f64(m.alpha)?;
            w.f64(m.beta1)?;
            w.f64(m.beta2)?;
            w.f64(m.theta1)?;
            w.f64(m.theta2)?;
            w.f64(m.const_c)?;
            w.matrix(&m.affine1_w)?;
            w.vector(&m.affine1_b)?;
            w.matrix(&m.affine2)?;
            w.matrix(&m.quad_q)?;
            w.matrix(&m.quad_p)?;
        }
    }
    w.w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        r: BufReader::new(file),
        path,
    };
    let mut magic = [0u8; 4];
    r.bytes(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(fmt_err(path, format!("bad magic {magic:?}, expected SVBE")));
    }
    let mut header = [0u8; 2];
    r.bytes(&mut header, "version and type tag")?;
    if header[0] != VERSION {
        return Err(fmt_err(
            path,
            format!("unsupported container version {}", header[0]),
        ));
    }
    match header[1] {
        TAG_GPLDA => {
            let mean = r.vector("preprocessor mean")?;
            let lda = r.matrix("preprocessor LDA")?;
            let diag = r.matrix("preprocessor diagonalizing transform")?;
            let phi = r.matrix("speaker subspace")?;
            let sigma_wc = r.matrix("within-class covariance")?;
            let pre = Preprocessor::new(mean, lda, diag)?;
            Ok(Model::Gplda(GPLDAModel::new(pre, phi, sigma_wc)?))
        }
        TAG_NPLDA => {
            let alpha = r.f64("alpha")?;
            let beta1 = r.f64("beta1")?;
            let beta2 = r.f64("beta2")?;
            let theta1 = r.f64("theta1")?;
            let theta2 = r.f64("theta2")?;
            let const_c = r.f64("constant")?;
            let affine1_w = r.matrix("affine1 weights")?;
            let affine1_b = r.vector("affine1 bias")?;
            let affine2 = r.matrix("affine2")?;
            let quad_q = r.matrix("quadratic Q")?;
            let quad_p = r.matrix("quadratic P")?;
            Ok(Model::Nplda(NPLDAModel {
                affine1_w,
                affine1_b,
                affine2,
                quad_q,
                quad_p,
                const_c,
                theta1,
                theta2,
                alpha,
                beta1,
                beta2,
            }))
        }
        other => Err(fmt_err(path, format!("unknown model type tag {other}"))),
    }
}

/// Loads a model and requires it to be the generative kind.
pub fn load_gplda(path: &Path) -> Result<GPLDAModel> {
    match load_model(path)? {
        Model::Gplda(m) => Ok(m),
        Model::Nplda(_) => Err(fmt_err(path, "expected a gplda model, found nplda")),
    }
}

/// Loads a model and requires it to be the neural kind.
pub fn load_nplda(path: &Path) -> Result<NPLDAModel> {
    match load_model(path)? {
        Model::Nplda(m) => Ok(m),
        Model::Gplda(_) => Err(fmt_err(path, "expected an nplda model, found gplda")),
    }
}
