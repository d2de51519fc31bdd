//! JSON persistence of the five-leaf affine stack.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::AffineGenerator;
use super::stack::{build_affine_stack, RegStack};
use crate::error::{Error, Result};

pub const AFFINE_STACK_KIND: &str = "affine5";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackFile {
    pub kind: String,
    pub generators: Vec<AffineGenerator>,
}

pub fn encode_affine_stack(stack: &RegStack) -> Result<String> {
    let generators: Vec<AffineGenerator> = stack.generators().into_iter().map(|(_, g)| g.clone()).collect();
    if generators.len() != 5 || stack.leaf_count() != 5 {
        return Err(Error::UnsupportedTopology(format!(
            "only five-leaf affine stacks are saved, got {} leaves",
            stack.leaf_count()
        )));
    }
    Ok(serde_json::to_string_pretty(&StackFile {
        kind: AFFINE_STACK_KIND.into(),
        generators,
    })?)
}

/// Rebuilds the stack, re-validating every generator and the
/// inverse-consistency check.
pub fn decode_affine_stack(text: &str) -> Result<RegStack> {
    let file: StackFile = serde_json::from_str(text)?;
    if file.kind != AFFINE_STACK_KIND {
        return Err(Error::UnsupportedTopology(format!("stack kind '{}'", file.kind)));
    }
    let gens = file
        .generators
        .into_iter()
        .map(|g| AffineGenerator::from_weights(g.spec().clone(), g.params().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    build_affine_stack(gens)
}

pub fn write_affine_stack(stack: &RegStack, path: &Path) -> Result<()> {
    std::fs::write(path, encode_affine_stack(stack)?).map_err(|e| Error::io_at(path, e))
}

pub fn read_affine_stack(path: &Path) -> Result<RegStack> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    decode_affine_stack(&text)
}
