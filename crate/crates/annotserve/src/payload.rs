use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use scancad::voxel::{Dims, GridDomain, OccupancyGrid};
use serde::{Deserialize, Serialize};

/// A grid as sent to the UI: dims plus the SCVX bit packing (x-major cell
/// order, least significant bit first) in base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPayload {
    pub dims: [usize; 3],
    pub occupancy: String,
}

impl GridPayload {
    pub fn encode(grid: &OccupancyGrid) -> Self {
        GridPayload {
            dims: grid.dims().as_array(),
            occupancy: STANDARD.encode(grid.packed_bytes()),
        }
    }

    pub fn decode(&self, object_id: &str, domain: GridDomain) -> Result<OccupancyGrid, String> {
        let [x, y, z] = self.dims;
        let dims = Dims::new(x, y, z);
        let bytes = STANDARD.decode(&self.occupancy).map_err(|e| e.to_string())?;
        if bytes.len() != dims.cells().div_ceil(8) {
            return Err(format!("{} bytes for a {dims} grid", bytes.len()));
        }
        let cells = (0..dims.cells()).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1);
        OccupancyGrid::from_cells(dims, cells, object_id, domain).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalPayload {
    pub cad_id: String,
    pub grid: GridPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub task_id: String,
    pub scan: GridPayload,
    pub proposals: Vec<ProposalPayload>,
    pub hint_image_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: String,
    pub ranked_selection: Vec<String>,
    pub annotator: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub pending_scans: usize,
    pub per_category: std::collections::BTreeMap<String, usize>,
    pub per_annotator: std::collections::BTreeMap<String, usize>,
}
