//! Label domains, intra-domain spatial priors and cross-domain links.
//!
//! A [`LabelDomain`] is one labeling system: ordered category names (index 0
//! is always background), a binary intra-domain adjacency matrix `M_intra`
//! marking which parts can touch spatially, and a render palette.  A
//! [`CrossLink`] relates two domains through a static similarity matrix
//! `M_static` (shape `Z_dst x Z_src`) and, when the destination is a strict
//! coarsening of the source, a total coarsening map fine-index -> coarse-index
//! from which the matrix can be derived.
//!
//! A [`DomainRegistry`] owns a consistent set of domains and links, exposes
//! lookups in either link orientation (transposing as needed), and computes a
//! content hash that checkpoints embed so that transfer runs can refuse
//! mismatched label spaces.
//!
//! Everything here is immutable after load; values are safe to share freely.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SstError};
use crate::tensor::Tensor;

/// Maximum number of categories per domain; 255 is reserved as ignore-index.
pub const MAX_LABELS: usize = 255;

/// One labeling system.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDomain {
    pub id: String,
    pub names: Vec<String>,
    /// `Z x Z` binary adjacency, row-major; symmetric, diagonal 1, background
    /// row and column all 1.
    pub m_intra: Vec<u8>,
    /// `Z` RGB colors for rendering.
    pub palette: Vec<[u8; 3]>,
}

impl LabelDomain {
    /// Number of categories (including background).
    pub fn z(&self) -> usize {
        self.names.len()
    }

    /// `M_intra` as an `f32` tensor for use as an attention mask.
    pub fn m_intra_tensor(&self) -> Tensor {
        let z = self.z();
        Tensor::from_vec(&[z, z], self.m_intra.iter().map(|&v| v as f32).collect())
    }

    /// Check all type invariants, naming the violated field on failure.
    pub fn validate(&self) -> Result<()> {
        let z = self.z();
        if z == 0 {
            return Err(SstError::Config(format!(
                "domain '{}': names must be non-empty",
                self.id
            )));
        }
        if z > MAX_LABELS {
            return Err(SstError::Config(format!(
                "domain '{}': {z} categories exceed the maximum of {MAX_LABELS} (255 is the ignore-index)",
                self.id
            )));
        }
        if self.names[0] != "background" {
            return Err(SstError::Config(format!(
                "domain '{}': names[0] must be \"background\", got \"{}\"",
                self.id, self.names[0]
            )));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for n in &self.names {
                if !seen.insert(n) {
                    return Err(SstError::Config(format!(
                        "domain '{}': duplicate category name \"{n}\"",
                        self.id
                    )));
                }
            }
        }
        if self.m_intra.len() != z * z {
            return Err(SstError::Config(format!(
                "domain '{}': M_intra has {} entries, expected {z}x{z}",
                self.id,
                self.m_intra.len()
            )));
        }
        if self.palette.len() != z {
            return Err(SstError::Config(format!(
                "domain '{}': palette has {} entries, expected {z}",
                self.id,
                self.palette.len()
            )));
        }
        for i in 0..z {
            for j in 0..z {
                let v = self.m_intra[i * z + j];
                if v > 1 {
                    return Err(SstError::Config(format!(
                        "domain '{}': M_intra[{i}][{j}] = {v} is not binary",
                        self.id
                    )));
                }
                if v != self.m_intra[j * z + i] {
                    return Err(SstError::Config(format!(
                        "domain '{}': M_intra not symmetric at [{i}][{j}]",
                        self.id
                    )));
                }
            }
            if self.m_intra[i * z + i] != 1 {
                return Err(SstError::Config(format!(
                    "domain '{}': M_intra diagonal [{i}][{i}] must be 1",
                    self.id
                )));
            }
            if self.m_intra[i] != 1 || self.m_intra[i * z] != 1 {
                return Err(SstError::Config(format!(
                    "domain '{}': M_intra background row/column must be all 1 (index {i})",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// A directed relation between two domains.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLink {
    pub src_id: String,
    pub dst_id: String,
    /// `Z_dst x Z_src` row-major, entries in `[0, 1]`.
    pub m_static: Vec<f32>,
    pub z_src: usize,
    pub z_dst: usize,
    /// For each src index, the dst index it merges into; present only when
    /// dst is a strict coarsening of src.
    pub coarsening: Option<Vec<u8>>,
}

impl CrossLink {
    pub fn m_static_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.z_dst, self.z_src], self.m_static.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let name = format!("{}->{}", self.src_id, self.dst_id);
        if self.m_static.len() != self.z_dst * self.z_src {
            return Err(SstError::Config(format!(
                "link {name}: M_static has {} entries, expected {}x{}",
                self.m_static.len(),
                self.z_dst,
                self.z_src
            )));
        }
        for (i, &v) in self.m_static.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(SstError::Config(format!(
                    "link {name}: M_static entry {i} = {v} outside [0, 1]"
                )));
            }
        }
        for r in 0..self.z_dst {
            if self.m_static[r * self.z_src..(r + 1) * self.z_src]
                .iter()
                .all(|&v| v == 0.0)
            {
                return Err(SstError::Config(format!(
                    "link {name}: M_static row {r} is all zero"
                )));
            }
        }
        if let Some(c) = &self.coarsening {
            if c.len() != self.z_src {
                return Err(SstError::Config(format!(
                    "link {name}: coarsening has {} entries, expected Z_src = {}",
                    c.len(),
                    self.z_src
                )));
            }
            if c[0] != 0 {
                return Err(SstError::Config(format!(
                    "link {name}: coarsening(0) = {} but background must map to background",
                    c[0]
                )));
            }
            for (f, &cc) in c.iter().enumerate() {
                if cc as usize >= self.z_dst {
                    return Err(SstError::Config(format!(
                        "link {name}: coarsening({f}) = {cc} exceeds Z_dst = {}",
                        self.z_dst
                    )));
                }
                if self.m_static[cc as usize * self.z_src + f] != 1.0 {
                    return Err(SstError::Config(format!(
                        "link {name}: M_static[{cc}][{f}] must be 1 where the coarsening maps {f} -> {cc}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Derive the binary static matrix implied by a coarsening map:
/// `M[c][f] = 1` iff `coarsening(f) == c`.
///
/// The map must be total over src indices and stay within `z_dst`.
pub fn derive_static_from_hierarchy(
    coarsening: &[u8],
    z_src: usize,
    z_dst: usize,
) -> Result<Vec<f32>> {
    if coarsening.len() != z_src {
        let missing: Vec<usize> = (coarsening.len()..z_src).collect();
        return Err(SstError::Config(format!(
            "coarsening map covers {} of {} src indices; unmapped: {:?}",
            coarsening.len(),
            z_src,
            missing
        )));
    }
    let mut m = vec![0.0f32; z_dst * z_src];
    for (f, &c) in coarsening.iter().enumerate() {
        if c as usize >= z_dst {
            return Err(SstError::Config(format!(
                "coarsening({f}) = {c} exceeds Z_dst = {z_dst}"
            )));
        }
        m[c as usize * z_src + f] = 1.0;
    }
    Ok(m)
}

/// Apply a coarsening map pointwise to a label raster.  The ignore value 255
/// passes through unchanged.
pub fn coarsen_labels(
    labels: &[u8],
    width: usize,
    coarsening: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l == 255 {
            out.push(255);
            continue;
        }
        let Some(&c) = coarsening.get(l as usize) else {
            return Err(SstError::LabelOutOfRange {
                value: l as u16,
                x: i % width,
                y: i / width,
                num_labels: coarsening.len(),
            });
        };
        out.push(c);
    }
    Ok(out)
}

// ---- on-disk schemas ----

#[derive(Debug, Serialize, Deserialize)]
struct DomainFile {
    id: String,
    names: Vec<String>,
    /// Category count; optional, validated against `names` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    z: Option<usize>,
    /// Adjacency as index pairs; symmetry, diagonal and background
    /// row/column are added at load.
    #[serde(skip_serializing_if = "Option::is_none")]
    intra_edges: Option<Vec<[usize; 2]>>,
    /// Alternatively a full row-major `Z x Z` matrix, validated as-is.
    #[serde(skip_serializing_if = "Option::is_none")]
    intra_matrix: Option<Vec<u8>>,
    palette: Vec<[u8; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LinkFile {
    src: String,
    dst: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    coarsening: Option<Vec<u8>>,
    /// Row-major `Z_dst x Z_src`; derived from `coarsening` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<f32>>,
}

/// Load and validate a domain definition from a JSON file.
pub fn load_domain(path: &Path) -> Result<LabelDomain> {
    let text = fs::read_to_string(path).map_err(|e| SstError::io(path, e))?;
    let file: DomainFile = serde_json::from_str(&text)
        .map_err(|e| SstError::format(path, format!("domain JSON: {e}")))?;
    let z = file.names.len();
    if let Some(zf) = file.z {
        if zf != z {
            return Err(SstError::format(
                path,
                format!("declared Z = {zf} but {z} names are listed"),
            ));
        }
    }
    let m_intra = match (&file.intra_edges, &file.intra_matrix) {
        (Some(edges), None) => {
            let mut m = vec![0u8; z * z];
            for i in 0..z {
                m[i * z + i] = 1;
                m[i] = 1;
                m[i * z] = 1;
            }
            for &[a, b] in edges {
                if a >= z || b >= z {
                    return Err(SstError::format(
                        path,
                        format!("intra_edges pair [{a}, {b}] out of range for Z = {z}"),
                    ));
                }
                m[a * z + b] = 1;
                m[b * z + a] = 1;
            }
            m
        }
        (None, Some(m)) => m.clone(),
        (Some(_), Some(_)) => {
            return Err(SstError::format(
                path,
                "give either intra_edges or intra_matrix, not both",
            ))
        }
        (None, None) => {
            return Err(SstError::format(
                path,
                "one of intra_edges or intra_matrix is required",
            ))
        }
    };
    let domain = LabelDomain {
        id: file.id,
        names: file.names,
        m_intra,
        palette: file.palette,
    };
    domain.validate()?;
    Ok(domain)
}

/// Serialize a domain to its canonical file form (edges above the diagonal,
/// excluding background and self edges, sorted).
pub fn save_domain(domain: &LabelDomain, path: &Path) -> Result<()> {
    let z = domain.z();
    let mut edges = Vec::new();
    for i in 1..z {
        for j in (i + 1)..z {
            if domain.m_intra[i * z + j] == 1 {
                edges.push([i, j]);
            }
        }
    }
    let file = DomainFile {
        id: domain.id.clone(),
        names: domain.names.clone(),
        z: Some(z),
        intra_edges: Some(edges),
        intra_matrix: None,
        palette: domain.palette.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("domain serialization");
    text.push('\n');
    fs::write(path, text).map_err(|e| SstError::io(path, e))
}

/// Load and validate a cross-link, deriving the static matrix from the
/// coarsening map when no explicit matrix is given.  Needs the endpoint
/// domains to know the expected shape.
pub fn load_link(path: &Path, src: &LabelDomain, dst: &LabelDomain) -> Result<CrossLink> {
    let text = fs::read_to_string(path).map_err(|e| SstError::io(path, e))?;
    let file: LinkFile = serde_json::from_str(&text)
        .map_err(|e| SstError::format(path, format!("link JSON: {e}")))?;
    if file.src != src.id || file.dst != dst.id {
        return Err(SstError::format(
            path,
            format!(
                "link endpoints {} -> {} do not match domains {} -> {}",
                file.src, file.dst, src.id, dst.id
            ),
        ));
    }
    let (z_src, z_dst) = (src.z(), dst.z());
    let m_static = match (&file.matrix, &file.coarsening) {
        (Some(m), _) => m.clone(),
        (None, Some(c)) => derive_static_from_hierarchy(c, z_src, z_dst)?,
        (None, None) => {
            return Err(SstError::format(
                path,
                "one of matrix or coarsening is required",
            ))
        }
    };
    let link = CrossLink {
        src_id: file.src,
        dst_id: file.dst,
        m_static,
        z_src,
        z_dst,
        coarsening: file.coarsening,
    };
    link.validate()?;
    Ok(link)
}

/// Serialize a link to its canonical file form.
pub fn save_link(link: &CrossLink, path: &Path) -> Result<()> {
    let file = LinkFile {
        src: link.src_id.clone(),
        dst: link.dst_id.clone(),
        coarsening: link.coarsening.clone(),
        // The matrix is redundant when a coarsening is present, but writing
        // it keeps files self-describing for external tools.
        matrix: Some(link.m_static.clone()),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("link serialization");
    text.push('\n');
    fs::write(path, text).map_err(|e| SstError::io(path, e))
}

/// A validated, immutable set of domains and cross-links.
#[derive(Debug, Clone, Default)]
pub struct DomainRegistry {
    domains: BTreeMap<String, LabelDomain>,
    links: BTreeMap<(String, String), CrossLink>,
}

impl DomainRegistry {
    pub fn new() -> Self {
        DomainRegistry::default()
    }

    /// Build a registry from in-memory values, validating everything.
    pub fn from_parts(
        domains: impl IntoIterator<Item = LabelDomain>,
        links: impl IntoIterator<Item = CrossLink>,
    ) -> Result<Self> {
        let mut reg = DomainRegistry::new();
        for d in domains {
            reg.add_domain(d)?;
        }
        for l in links {
            reg.add_link(l)?;
        }
        Ok(reg)
    }

    pub fn add_domain(&mut self, domain: LabelDomain) -> Result<()> {
        domain.validate()?;
        if self.domains.contains_key(&domain.id) {
            return Err(SstError::Config(format!(
                "duplicate domain id '{}'",
                domain.id
            )));
        }
        self.domains.insert(domain.id.clone(), domain);
        Ok(())
    }

    pub fn add_link(&mut self, link: CrossLink) -> Result<()> {
        link.validate()?;
        let src = self.domain(&link.src_id)?;
        let dst = self.domain(&link.dst_id)?;
        if src.z() != link.z_src || dst.z() != link.z_dst {
            return Err(SstError::Config(format!(
                "link {}->{}: shape ({}, {}) does not match domain sizes ({}, {})",
                link.src_id,
                link.dst_id,
                link.z_dst,
                link.z_src,
                dst.z(),
                src.z()
            )));
        }
        let key = (link.src_id.clone(), link.dst_id.clone());
        if self.links.contains_key(&key) {
            return Err(SstError::Config(format!(
                "duplicate link {} -> {}",
                key.0, key.1
            )));
        }
        self.links.insert(key, link);
        Ok(())
    }

    pub fn domain(&self, id: &str) -> Result<&LabelDomain> {
        self.domains
            .get(id)
            .ok_or_else(|| SstError::Config(format!("unknown domain '{id}'")))
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(|s| s.as_str())
    }

    pub fn links(&self) -> impl Iterator<Item = &CrossLink> {
        self.links.values()
    }

    /// The link from `src` to `dst` in the stored orientation, if any.
    pub fn link(&self, src: &str, dst: &str) -> Option<&CrossLink> {
        self.links.get(&(src.to_string(), dst.to_string()))
    }

    /// The static similarity matrix mapping `src` representations into
    /// `dst`'s label space, shape `(Z_dst, Z_src)`.  Falls back to the
    /// transpose of the reverse link (similarity is symmetric).
    pub fn static_matrix(&self, src: &str, dst: &str) -> Result<Tensor> {
        if let Some(l) = self.link(src, dst) {
            return Ok(l.m_static_tensor());
        }
        if let Some(l) = self.link(dst, src) {
            let (zd, zs) = (l.z_dst, l.z_src);
            let mut t = vec![0.0f32; zs * zd];
            for r in 0..zd {
                for c in 0..zs {
                    t[c * zd + r] = l.m_static[r * zs + c];
                }
            }
            return Ok(Tensor::from_vec(&[zs, zd], t));
        }
        Err(SstError::Config(format!(
            "no cross-link between '{src}' and '{dst}' in either direction"
        )))
    }

    /// The coarsening map from `src` to `dst`, if the stored link carries one.
    pub fn coarsening(&self, src: &str, dst: &str) -> Option<&[u8]> {
        self.link(src, dst)
            .and_then(|l| l.coarsening.as_deref())
    }

    /// Content hash over all domains and links in canonical order, hex-encoded.
    /// Checkpoints embed this so transfer runs can detect label-space drift.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, d) in &self.domains {
            h.update(b"domain\0");
            h.update(id.as_bytes());
            h.update([0]);
            for n in &d.names {
                h.update(n.as_bytes());
                h.update([0]);
            }
            h.update(&d.m_intra);
            for p in &d.palette {
                h.update(p);
            }
        }
        for ((s, t), l) in &self.links {
            h.update(b"link\0");
            h.update(s.as_bytes());
            h.update([0]);
            h.update(t.as_bytes());
            h.update([0]);
            for v in &l.m_static {
                h.update(v.to_le_bytes());
            }
            match &l.coarsening {
                Some(c) => {
                    h.update([1]);
                    h.update(c);
                }
                None => h.update([0]),
            }
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            use std::fmt::Write;
            write!(s, "{b:02x}").expect("hex");
        }
        s
    }
}
