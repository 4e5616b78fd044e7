//! Single-file binary checkpoint: config JSON, vocabularies, named parameter
//! arrays, optimizer state, best validation score and RNG position. All
//! numeric payloads are little-endian `f64`, so a save/load round trip is
//! bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::model::ModelParams;
use crate::tensor::Mat;
use crate::trainer::{AdamState, TrainConfig};

const MAGIC: &[u8; 8] = b"VTMCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: ModelParams,
    pub adam: AdamState,
    pub best_val: f64,
    pub best_epoch: usize,
    /// Training noise stream: (seed, ChaCha word position).
    pub rng: (u64, u128),
}

fn write_bytes(w: &mut impl Write, data: &[u8]) -> io::Result<()> {
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(data)
}

fn read_bytes(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_mat(w: &mut impl Write, m: &Mat) -> io::Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat(r: &mut impl Read) -> io::Result<Mat> {
    let mut dims = [0u8; 16];
    r.read_exact(&mut dims)?;
    let rows = u64::from_le_bytes(dims[..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(dims[8..].try_into().unwrap()) as usize;
    let mut data = vec![0u8; rows * cols * 8];
    r.read_exact(&mut data)?;
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Mat::from_shape_vec((rows, cols), values)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(&mut w, serde_json::to_string(&self.config)?.as_bytes())?;
        write_bytes(&mut w, serde_json::to_string(&self.vocab)?.as_bytes())?;

        let mut names = Vec::new();
        self.model.visit(&mut |_, name, _| names.push(name));
        w.write_all(&(names.len() as u64).to_le_bytes())?;
        let mut result = Ok(());
        self.model.visit(&mut |_, name, mat| {
            if result.is_err() {
                return;
            }
            result = write_bytes(&mut w, name.as_bytes()).and_then(|_| write_mat(&mut w, mat));
        });
        result?;

        w.write_all(&(self.adam.len() as u64).to_le_bytes())?;
        for i in 0..self.adam.len() {
            w.write_all(&self.adam.step_count(i).to_le_bytes())?;
            write_mat(&mut w, self.adam.first_moment(i))?;
            write_mat(&mut w, self.adam.second_moment(i))?;
        }

        w.write_all(&self.best_val.to_le_bytes())?;
        w.write_all(&(self.best_epoch as u64).to_le_bytes())?;
        w.write_all(&self.rng.0.to_le_bytes())?;
        w.write_all(&self.rng.1.to_le_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let mut r = BufReader::new(
            File::open(path)
                .map_err(|e| anyhow::anyhow!("cannot open checkpoint {}: {e}", path.display()))?,
        );
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            anyhow::bail!("{} is not a checkpoint file", path.display());
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        if u32::from_le_bytes(version) != VERSION {
            anyhow::bail!("unsupported checkpoint version");
        }
        let config: TrainConfig = serde_json::from_slice(&read_bytes(&mut r)?)?;
        let mut vocab: Vocabulary = serde_json::from_slice(&read_bytes(&mut r)?)?;
        vocab.rebuild_index();

        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let n_params = u64::from_le_bytes(count) as usize;
        let mut arrays = std::collections::HashMap::new();
        for _ in 0..n_params {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|e| anyhow::anyhow!("bad parameter name: {e}"))?;
            arrays.insert(name, read_mat(&mut r)?);
        }

        // Rebuild the model skeleton at the right shapes, then overwrite
        // every array from the file.
        let dims = config.dims(vocab.word_count(), vocab.field_count());
        let mut init_rng = crate::rng::stream(0, "checkpoint-shape");
        let mut model = ModelParams::init(dims, &mut init_rng);
        let mut missing = Vec::new();
        model.visit_mut(&mut |_, name, mat| match arrays.remove(name) {
            Some(stored) if stored.dim() == mat.dim() => *mat = stored,
            Some(stored) => missing.push(format!(
                "{name}: shape {:?} in file, {:?} expected",
                stored.dim(),
                mat.dim()
            )),
            None => missing.push(format!("{name}: absent from checkpoint")),
        });
        if !missing.is_empty() {
            anyhow::bail!("checkpoint mismatch: {}", missing.join("; "));
        }
        if !arrays.is_empty() {
            let extra: Vec<String> = arrays.keys().cloned().collect();
            anyhow::bail!("checkpoint has unknown parameters: {}", extra.join(", "));
        }

        r.read_exact(&mut count)?;
        let n_adam = u64::from_le_bytes(count) as usize;
        let mut adam = AdamState::new(&model);
        if n_adam != adam.len() {
            anyhow::bail!("optimizer state count mismatch");
        }
        for i in 0..n_adam {
            let mut t = [0u8; 8];
            r.read_exact(&mut t)?;
            let m = read_mat(&mut r)?;
            let v = read_mat(&mut r)?;
            adam.restore(i, u64::from_le_bytes(t), m, v);
        }

        let mut f = [0u8; 8];
        r.read_exact(&mut f)?;
        let best_val = f64::from_le_bytes(f);
        r.read_exact(&mut f)?;
        let best_epoch = u64::from_le_bytes(f) as usize;
        r.read_exact(&mut f)?;
        let rng_seed = u64::from_le_bytes(f);
        let mut pos = [0u8; 16];
        r.read_exact(&mut pos)?;
        let rng_pos = u128::from_le_bytes(pos);

        Ok(Self {
            config,
            vocab,
            model,
            adam,
            best_val,
            best_epoch,
            rng: (rng_seed, rng_pos),
        })
    }
}
