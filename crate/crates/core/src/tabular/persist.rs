//! Binary policy tables: magic bytes, a little-endian `u32` header length,
//! a JSON header, then the action and value tables as little-endian `f64`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::grid::{ActionLattice, Grid};
use super::pi::TabularPolicy;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PODECTBL";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    states: Vec<usize>,
    inputs: Vec<usize>,
    grid: Grid,
    lattice: ActionLattice,
    policy_iterations: usize,
    sweeps: usize,
    nodes: usize,
}

pub fn write_policy<W: Write>(mut w: W, p: &TabularPolicy) -> Result<()> {
    let header = Header {
        version: 1,
        states: p.states.clone(),
        inputs: p.inputs.clone(),
        grid: p.grid.clone(),
        lattice: p.lattice.clone(),
        policy_iterations: p.policy_iterations,
        sweeps: p.sweeps,
        nodes: p.grid.len(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for v in p.actions.iter().chain(&p.values) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_policy<R: Read>(mut r: R) -> Result<TabularPolicy> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidConfig("not a policy table".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json)?;
    if h.nodes != h.grid.len() {
        return Err(Error::InvalidConfig("policy header node count mismatch".into()));
    }
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let actions = read_f64s(h.nodes * h.inputs.len())?;
    let values = read_f64s(h.nodes)?;
    Ok(TabularPolicy {
        states: h.states,
        inputs: h.inputs,
        grid: h.grid,
        lattice: h.lattice,
        actions,
        values,
        policy_iterations: h.policy_iterations,
        sweeps: h.sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let grid = Grid::new(vec![-1.0], vec![1.0], vec![3]);
        let p = TabularPolicy {
            states: vec![1],
            inputs: vec![0],
            grid,
            lattice: ActionLattice { levels: vec![vec![-1.0, 0.0, 1.0]] },
            actions: vec![1.0, 0.0, -1.0],
            values: vec![0.5, 0.0, 0.5],
            policy_iterations: 3,
            sweeps: 40,
        };
        let mut buf = Vec::new();
        write_policy(&mut buf, &p).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(read_policy(&buf[..]).unwrap(), p);
        assert!(read_policy(&b"NOTATABLE..."[..]).is_err());
    }
}
