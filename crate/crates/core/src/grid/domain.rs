use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Lattice node classification, stored as the TDGRID1 mask byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum NodeKind {
    Outside = 0,
    Interior = 1,
    Boundary = 2,
}

impl NodeKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(NodeKind::Outside),
            1 => Some(NodeKind::Interior),
            2 => Some(NodeKind::Boundary),
            _ => None,
        }
    }

    pub fn in_domain(self) -> bool {
        self != NodeKind::Outside
    }
}

pub type PlaneFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Planar region to be discretized.
#[derive(Clone)]
pub enum Shape {
    /// Closed rectangle; its edge nodes are the Dirichlet nodes.
    Rectangle {
        xmin: f64,
        xmax: f64,
        ymin: f64,
        ymax: f64,
    },
    /// Disk of the given radius. Lattice nodes with `|z - c| < radius + h/2`
    /// are kept, so the Dirichlet nodes lie within `h/2` of the circle.
    Disk { cx: f64, cy: f64, radius: f64 },
    /// Sublevel set `{f < level}` of an exhaustion function inside `bbox`
    /// (`[xmin, xmax, ymin, ymax]`).
    Sublevel {
        f: PlaneFn,
        level: f64,
        bbox: [f64; 4],
    },
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Rectangle {
                xmin,
                xmax,
                ymin,
                ymax,
            } => write!(f, "Rectangle[{xmin}, {xmax}]x[{ymin}, {ymax}]"),
            Shape::Disk { cx, cy, radius } => write!(f, "Disk(c=({cx}, {cy}), R={radius})"),
            Shape::Sublevel { level, bbox, .. } => {
                write!(f, "Sublevel(level={level}, bbox={bbox:?})")
            }
        }
    }
}

/// Conformal factor `λ` of the Kähler metric `λ |dz|^2`.
#[derive(Clone)]
pub enum ConformalFactor {
    Flat,
    /// `λ = exp(a |z|^2)`
    Gaussian { a: f64 },
    Custom(PlaneFn),
}

impl ConformalFactor {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            ConformalFactor::Flat => 1.0,
            ConformalFactor::Gaussian { a } => (a * (x * x + y * y)).exp(),
            ConformalFactor::Custom(f) => f(x, y),
        }
    }
}

impl fmt::Debug for ConformalFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConformalFactor::Flat => write!(f, "Flat"),
            ConformalFactor::Gaussian { a } => write!(f, "Gaussian(a={a})"),
            ConformalFactor::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DomainSpec {
    pub shape: Shape,
    pub h: f64,
    pub lambda: ConformalFactor,
}

impl DomainSpec {
    pub fn rectangle(xmin: f64, xmax: f64, ymin: f64, ymax: f64, h: f64) -> Self {
        DomainSpec {
            shape: Shape::Rectangle {
                xmin,
                xmax,
                ymin,
                ymax,
            },
            h,
            lambda: ConformalFactor::Flat,
        }
    }

    pub fn disk(cx: f64, cy: f64, radius: f64, h: f64) -> Self {
        DomainSpec {
            shape: Shape::Disk { cx, cy, radius },
            h,
            lambda: ConformalFactor::Flat,
        }
    }

    pub fn with_lambda(mut self, lambda: ConformalFactor) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn build(&self) -> Result<DiscreteDomain> {
        DiscreteDomain::build(self)
    }
}

/// A uniform lattice with an interior/boundary/outside mask.
///
/// Node `(i, j)` sits at `(x0 + i h, y0 + j h)` and is stored at index
/// `j * nx + i`. Every field in the crate is a full-lattice array in that
/// order; values at outside nodes are ignored.
#[derive(Clone, Debug)]
pub struct DiscreteDomain {
    nx: usize,
    ny: usize,
    h: f64,
    x0: f64,
    y0: f64,
    mask: Vec<NodeKind>,
    lambda: Vec<f64>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    /// lattice index -> position in `interior`, `usize::MAX` elsewhere
    slot: Vec<usize>,
}

impl DiscreteDomain {
    pub fn build(spec: &DomainSpec) -> Result<Self> {
        let h = spec.h;
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Domain(format!("spacing must be positive, got {h}")));
        }
        match &spec.shape {
            Shape::Rectangle {
                xmin,
                xmax,
                ymin,
                ymax,
            } => {
                let nx = lattice_count(*xmax - *xmin, h)?;
                let ny = lattice_count(*ymax - *ymin, h)?;
                let mut mask = vec![NodeKind::Interior; nx * ny];
                for j in 0..ny {
                    for i in 0..nx {
                        if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                            mask[j * nx + i] = NodeKind::Boundary;
                        }
                    }
                }
                Self::from_mask(nx, ny, h, *xmin, *ymin, mask, &spec.lambda)
            }
            Shape::Disk { cx, cy, radius } => {
                let (cx, cy, r) = (*cx, *cy, *radius);
                if !(r > 0.0) {
                    return Err(Error::Domain(format!("disk radius must be positive, got {r}")));
                }
                // Dirichlet nodes straddle the circle: radius in (r - h/2, r + h/2)
                let f: PlaneFn = Arc::new(move |x, y| (x - cx).hypot(y - cy));
                let rr = r + 0.5 * h;
                Self::sublevel(&f, rr, [cx - rr, cx + rr, cy - rr, cy + rr], h, &spec.lambda)
            }
            Shape::Sublevel { f, level, bbox } => Self::sublevel(f, *level, *bbox, h, &spec.lambda),
        }
    }

    /// Nodes of the global lattice `hZ^2` with `f < level`; those with a
    /// lattice neighbour outside the set become Dirichlet nodes.
    fn sublevel(
        f: &PlaneFn,
        level: f64,
        bbox: [f64; 4],
        h: f64,
        lambda: &ConformalFactor,
    ) -> Result<Self> {
        let imin = (bbox[0] / h).floor() as i64 - 1;
        let imax = (bbox[1] / h).ceil() as i64 + 1;
        let jmin = (bbox[2] / h).floor() as i64 - 1;
        let jmax = (bbox[3] / h).ceil() as i64 + 1;
        let nx = (imax - imin + 1) as usize;
        let ny = (jmax - jmin + 1) as usize;
        let x0 = imin as f64 * h;
        let y0 = jmin as f64 * h;
        let inside: Vec<bool> = (0..nx * ny)
            .map(|k| {
                let (i, j) = (k % nx, k / nx);
                f(x0 + i as f64 * h, y0 + j as f64 * h) < level
            })
            .collect();
        if !inside.iter().any(|&b| b) {
            return Err(Error::Domain(format!(
                "sublevel set {{f < {level}}} contains no lattice node at h = {h}"
            )));
        }
        let mut mask = vec![NodeKind::Outside; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                if !inside[k] {
                    continue;
                }
                let on_edge = i == 0 || j == 0 || i == nx - 1 || j == ny - 1;
                let all_in = !on_edge
                    && inside[k - 1]
                    && inside[k + 1]
                    && inside[k - nx]
                    && inside[k + nx];
                mask[k] = if all_in {
                    NodeKind::Interior
                } else {
                    NodeKind::Boundary
                };
            }
        }
        Self::from_mask(nx, ny, h, x0, y0, mask, lambda)
    }

    /// Assembles a domain from an explicit mask, checking the lattice invariants.
    pub fn from_mask(
        nx: usize,
        ny: usize,
        h: f64,
        x0: f64,
        y0: f64,
        mask: Vec<NodeKind>,
        lambda: &ConformalFactor,
    ) -> Result<Self> {
        if mask.len() != nx * ny {
            return Err(Error::Domain("mask length does not match nx*ny".into()));
        }
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut slot = vec![usize::MAX; nx * ny];
        for (k, kind) in mask.iter().enumerate() {
            match kind {
                NodeKind::Interior => {
                    let (i, j) = (k % nx, k / nx);
                    if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
                        return Err(Error::Domain(format!(
                            "interior node ({i}, {j}) lies on the lattice edge"
                        )));
                    }
                    for n in [k - 1, k + 1, k - nx, k + nx] {
                        if mask[n] == NodeKind::Outside {
                            return Err(Error::Domain(format!(
                                "interior node ({i}, {j}) has an outside neighbour"
                            )));
                        }
                    }
                    slot[k] = interior.len();
                    interior.push(k);
                }
                NodeKind::Boundary => boundary.push(k),
                NodeKind::Outside => {}
            }
        }
        if interior.is_empty() {
            return Err(Error::Domain("domain has no interior node".into()));
        }
        if boundary.is_empty() {
            return Err(Error::Domain("domain has no boundary node".into()));
        }
        // edge-connectedness of the interior
        let mut seen = vec![false; nx * ny];
        let mut queue = VecDeque::from([interior[0]]);
        seen[interior[0]] = true;
        let mut reached = 1;
        while let Some(k) = queue.pop_front() {
            for n in [k - 1, k + 1, k - nx, k + nx] {
                if mask[n] == NodeKind::Interior && !seen[n] {
                    seen[n] = true;
                    reached += 1;
                    queue.push_back(n);
                }
            }
        }
        if reached != interior.len() {
            return Err(Error::Domain(format!(
                "interior is disconnected: {} of {} nodes reachable from the first",
                reached,
                interior.len()
            )));
        }
        let lambda: Vec<f64> = (0..nx * ny)
            .map(|k| lambda.eval(x0 + (k % nx) as f64 * h, y0 + (k / nx) as f64 * h))
            .collect();
        for &k in interior.iter().chain(&boundary) {
            if !(lambda[k] > 0.0 && lambda[k].is_finite()) {
                return Err(Error::Domain(format!(
                    "conformal factor must be positive, got {} at node {k}",
                    lambda[k]
                )));
            }
        }
        Ok(DiscreteDomain {
            nx,
            ny,
            h,
            x0,
            y0,
            mask,
            lambda,
            interior,
            boundary,
            slot,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.x0, self.y0)
    }

    pub fn mask(&self) -> &[NodeKind] {
        &self.mask
    }

    pub fn kind(&self, k: usize) -> NodeKind {
        self.mask[k]
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Lattice indices of interior nodes, in lattice order.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    /// Interior and boundary nodes, in lattice order.
    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&k| self.mask[k].in_domain())
    }

    /// Position of lattice node `k` within [`Self::interior`].
    pub fn interior_slot(&self, k: usize) -> Option<usize> {
        match self.slot[k] {
            usize::MAX => None,
            s => Some(s),
        }
    }

    pub fn coords(&self, k: usize) -> (f64, f64) {
        (
            self.x0 + (k % self.nx) as f64 * self.h,
            self.y0 + (k / self.nx) as f64 * self.h,
        )
    }

    /// Lattice neighbours (east, west, north, south) of an interior node.
    #[inline]
    pub fn neighbours(&self, k: usize) -> [usize; 4] {
        [k + 1, k - 1, k + self.nx, k - self.nx]
    }

    /// Lattice index of the node at offset `(di, dj)` from `k`, if on the lattice.
    pub fn offset(&self, k: usize, di: i64, dj: i64) -> Option<usize> {
        let i = (k % self.nx) as i64 + di;
        let j = (k / self.nx) as i64 + dj;
        if i < 0 || j < 0 || i >= self.nx as i64 || j >= self.ny as i64 {
            None
        } else {
            Some(j as usize * self.nx + i as usize)
        }
    }

    /// Area element `λ h^2` of node `k`.
    pub fn area_weight(&self, k: usize) -> f64 {
        self.lambda[k] * self.h * self.h
    }

    /// True when both domains share lattice geometry and mask.
    pub fn same_lattice(&self, other: &DiscreteDomain) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.h == other.h
            && self.x0 == other.x0
            && self.y0 == other.y0
            && self.mask == other.mask
    }
}

fn lattice_count(extent: f64, h: f64) -> Result<usize> {
    if !(extent > 0.0) {
        return Err(Error::Domain(format!("rectangle extent must be positive, got {extent}")));
    }
    let cells = extent / h;
    let n = cells.round();
    if (cells - n).abs() > 1e-9 * cells.max(1.0) {
        return Err(Error::Domain(format!(
            "extent {extent} is not a multiple of h = {h}"
        )));
    }
    if n < 2.0 {
        return Err(Error::Domain(format!(
            "extent {extent} at h = {h} leaves no interior node"
        )));
    }
    Ok(n as usize + 1)
}
