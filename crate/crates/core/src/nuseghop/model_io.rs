//! Binary model container: `NSHM`, a `u32` version, then length-prefixed
//! little-endian sections.

use std::io::{Read, Write};

use super::gbdt::{Gbdt, Node, Tree};
use super::saab::{PcaBasis, SaabKernel};
use super::{NuSegHopConfig, NuSegHopModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NSHM";
const VERSION: u32 = 1;

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn kernel(&mut self, k: &SaabKernel) {
        let (a, b, c) = k.input_dims;
        for d in [a, b, c] {
            self.len(d);
        }
        self.0.push(u8::from(k.dc_included));
        self.f64s(&k.weights);
        self.f64s(&k.energies);
    }
    fn basis(&mut self, b: &PcaBasis) {
        self.f64s(&b.mean);
        self.f64s(&b.components);
        self.f64s(&b.energies);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

fn truncated() -> Error {
    Error::Format { what: "model", detail: "truncated section".into() }
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(truncated)?;
        let s = &self.data[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // Guards allocations against corrupt lengths.
        if v > (self.data.len() - self.at) as u64 * 8 + 64 {
            return Err(truncated());
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn kernel(&mut self) -> Result<SaabKernel> {
        let dims = (self.len()?, self.len()?, self.len()?);
        let dc = self.take(1)?[0] != 0;
        let weights = self.f64s()?;
        let energies = self.f64s()?;
        if weights.len() != energies.len() * dims.0 * dims.1 * dims.2 {
            return Err(Error::Format { what: "model", detail: "kernel shape".into() });
        }
        Ok(SaabKernel { weights, energies, input_dims: dims, dc_included: dc })
    }
    fn basis(&mut self) -> Result<PcaBasis> {
        let b = PcaBasis { mean: self.f64s()?, components: self.f64s()?, energies: self.f64s()? };
        if b.components.len() != b.energies.len() * b.mean.len() {
            return Err(Error::Format { what: "model", detail: "basis shape".into() });
        }
        Ok(b)
    }
    fn done(&self) -> Result<()> {
        if self.at == self.data.len() {
            Ok(())
        } else {
            Err(Error::Format { what: "model", detail: "trailing bytes in section".into() })
        }
    }
}

fn sections(model: &NuSegHopModel) -> Result<Vec<Vec<u8>>> {
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Format { what: "model", detail: e.to_string() })?;
    let mut l1 = Buf::default();
    l1.kernel(&model.layer1);
    let mut l2 = Buf::default();
    l2.len(model.layer2.len());
    model.layer2.iter().for_each(|k| l2.kernel(k));
    let mut spec = Buf::default();
    spec.len(model.l1_spectral.len());
    model.l1_spectral.iter().for_each(|b| spec.basis(b));
    spec.len(model.l2_spectral.len());
    for group in &model.l2_spectral {
        spec.len(group.len());
        group.iter().for_each(|b| spec.basis(b));
    }
    let mut sel = Buf::default();
    sel.len(model.selected.len());
    model.selected.iter().for_each(|&i| sel.len(i));
    let mut trees = Buf::default();
    let c = &model.classifier;
    trees.len(c.n_features);
    trees.0.extend_from_slice(&c.base_score.to_le_bytes());
    trees.len(c.trees.len());
    for t in &c.trees {
        trees.len(t.nodes.len());
        for n in &t.nodes {
            trees.0.extend_from_slice(&n.feature.to_le_bytes());
            trees.0.extend_from_slice(&n.threshold.to_le_bytes());
            trees.0.extend_from_slice(&n.left.to_le_bytes());
            trees.0.extend_from_slice(&n.right.to_le_bytes());
            trees.0.extend_from_slice(&n.value.to_le_bytes());
        }
    }
    Ok(vec![config, l1.0, l2.0, spec.0, sel.0, trees.0])
}

pub fn write_model<W: Write>(model: &NuSegHopModel, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for s in sections(model)? {
        out.write_all(&(s.len() as u64).to_le_bytes())?;
        out.write_all(&s)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<NuSegHopModel> {
    let mut all = Vec::new();
    input.read_to_end(&mut all)?;
    let mut top = Cursor { data: &all, at: 0 };
    if top.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format { what: "model", detail: "bad magic".into() });
    }
    let version = u32::from_le_bytes(top.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format { what: "model", detail: format!("unsupported version {version}") });
    }
    let mut section = || -> Result<Cursor> {
        let n = top.u64()? as usize;
        Ok(Cursor { data: top.take(n)?, at: 0 })
    };
    let cfg_bytes = section()?;
    let config: NuSegHopConfig =
        serde_json::from_slice(cfg_bytes.data).map_err(|e| Error::Format { what: "model", detail: e.to_string() })?;
    let mut s = section()?;
    let layer1 = s.kernel()?;
    s.done()?;
    let mut s = section()?;
    let n = s.len()?;
    let layer2 = (0..n).map(|_| s.kernel()).collect::<Result<Vec<_>>>()?;
    s.done()?;
    let mut s = section()?;
    let n = s.len()?;
    let l1_spectral = (0..n).map(|_| s.basis()).collect::<Result<Vec<_>>>()?;
    let n = s.len()?;
    let mut l2_spectral = Vec::with_capacity(n);
    for _ in 0..n {
        let m = s.len()?;
        l2_spectral.push((0..m).map(|_| s.basis()).collect::<Result<Vec<_>>>()?);
    }
    s.done()?;
    let mut s = section()?;
    let n = s.len()?;
    let selected = (0..n).map(|_| s.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    s.done()?;
    let mut s = section()?;
    let n_features = s.len()?;
    let base_score = s.f64()?;
    let n = s.len()?;
    let mut trees = Vec::with_capacity(n);
    for _ in 0..n {
        let m = s.len()?;
        let mut nodes = Vec::with_capacity(m);
        for idx in 0..m {
            let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
            let feature = u32_at(s.take(4)?);
            let threshold = f32::from_le_bytes(s.take(4)?.try_into().unwrap());
            let left = u32_at(s.take(4)?);
            let right = u32_at(s.take(4)?);
            let value = s.f64()?;
            // Children always follow their parent, so traversal terminates.
            let bad_child = |c: u32| c as usize >= m || c as usize <= idx;
            if feature != super::gbdt::LEAF && (feature as usize >= n_features || bad_child(left) || bad_child(right)) {
                return Err(Error::Format { what: "model", detail: "tree child out of range".into() });
            }
            nodes.push(Node { feature, threshold, left, right, value });
        }
        trees.push(Tree { nodes });
    }
    s.done()?;
    if top.at != all.len() {
        return Err(Error::Format { what: "model", detail: "trailing bytes".into() });
    }
    let model = NuSegHopModel {
        config,
        layer1,
        layer2,
        l1_spectral,
        l2_spectral,
        selected,
        classifier: Gbdt { n_features, base_score, trees },
    };
    model.check()?;
    Ok(model)
}
