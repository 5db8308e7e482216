use crate::error::{Error, Result};

/// Concatenate documents with `eos` between them and cut the stream into
/// consecutive blocks of `block_len`; a trailing partial block is dropped.
pub fn pack_sequences<D: AsRef<[u32]>>(docs: &[D], block_len: usize, eos: u32) -> Result<Vec<Vec<u32>>> {
    if block_len < 2 {
        return Err(Error::Config(format!("block_len must be at least 2, got {block_len}")));
    }
    let mut stream = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            stream.push(eos);
        }
        stream.extend_from_slice(d.as_ref());
    }
    if stream.len() < block_len {
        return Err(Error::Input(format!(
            "token stream of {} is shorter than one block of {block_len}",
            stream.len()
        )));
    }
    Ok(stream.chunks_exact(block_len).map(<[u32]>::to_vec).collect())
}

/// Inputs and next-token targets for one block.
pub fn clm_pair(block: &[u32]) -> (&[u32], Vec<usize>) {
    let n = block.len() - 1;
    (&block[..n], block[1..].iter().map(|&t| t as usize).collect())
}
