use crate::error::{Error, Result};
use crate::numerics::{Element, Mask, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Target,
    Condition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Rgb,
    Pointmap,
    Text,
}

/// What a token is: target or condition, which domain, and for condition
/// image tokens the view it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenRole {
    pub branch: Branch,
    pub domain: Domain,
    pub view: Option<usize>,
}

impl TokenRole {
    pub fn text() -> Self {
        Self {
            branch: Branch::Condition,
            domain: Domain::Text,
            view: None,
        }
    }

    pub fn target(domain: Domain) -> Self {
        Self {
            branch: Branch::Target,
            domain,
            view: None,
        }
    }

    pub fn condition(domain: Domain, view: usize) -> Self {
        Self {
            branch: Branch::Condition,
            domain,
            view: Some(view),
        }
    }

    /// Condition image token (either domain), the rows Reference-LoRA acts on.
    pub fn is_condition_image(&self) -> bool {
        self.branch == Branch::Condition && self.domain != Domain::Text
    }

    pub fn is_image(&self) -> bool {
        self.domain != Domain::Text
    }
}

/// Shape of a token sequence before any embedding exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayoutSpec {
    pub text_tokens: usize,
    /// Patch grid `(rows, cols)` shared by every image block.
    pub grid: (usize, usize),
    pub views: usize,
    pub pointmap: bool,
    /// Condition blocks share one grid shifted by the target width; when off,
    /// every image block gets its own rows in sequence order.
    pub shared_positions: bool,
}

/// Per-token roles, positions and timesteps of an assembled sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub roles: Vec<TokenRole>,
    pub positions: Vec<(i32, i32)>,
    pub timesteps: Vec<f32>,
    pub grid: (usize, usize),
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn indices(&self, pred: impl Fn(&TokenRole) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(&self.roles[i])).collect()
    }

    /// Indices of target tokens, rgb block first.
    pub fn target_indices(&self) -> Vec<usize> {
        self.indices(|r| r.branch == Branch::Target)
    }
}

/// Lay out `[text | target-rgb | target-pm | view-0 rgb | view-0 pm | ...]`.
///
/// Target tokens carry grid position `(i, j)` and timestep `t`; condition
/// image tokens carry `(i - w, j)` with `w` the grid width and timestep 0.
/// Text tokens sit at `(0, 0)` with timestep `t`.
pub fn assemble_layout(spec: &LayoutSpec, t: f32) -> TokenLayout {
    let (gh, gw) = spec.grid;
    let per = gh * gw;
    let mut layout = TokenLayout {
        roles: Vec::new(),
        positions: Vec::new(),
        timesteps: Vec::new(),
        grid: spec.grid,
    };
    for _ in 0..spec.text_tokens {
        layout.roles.push(TokenRole::text());
        layout.positions.push((0, 0));
        layout.timesteps.push(t);
    }
    let mut blocks = vec![TokenRole::target(Domain::Rgb)];
    if spec.pointmap {
        blocks.push(TokenRole::target(Domain::Pointmap));
    }
    for v in 0..spec.views {
        blocks.push(TokenRole::condition(Domain::Rgb, v));
        if spec.pointmap {
            blocks.push(TokenRole::condition(Domain::Pointmap, v));
        }
    }
    for (b, role) in blocks.iter().enumerate() {
        for k in 0..per {
            let (i, j) = ((k / gw) as i32, (k % gw) as i32);
            let pos = if !spec.shared_positions {
                (i + (b * gh) as i32, j)
            } else if role.branch == Branch::Condition {
                (i - gw as i32, j)
            } else {
                (i, j)
            };
            layout.roles.push(*role);
            layout.positions.push(pos);
            layout.timesteps.push(if role.branch == Branch::Target { t } else { 0.0 });
        }
    }
    layout
}

/// Embedded sequence on a tape together with its layout.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub layout: TokenLayout,
    pub embeddings: Var,
}

/// Stack already-embedded blocks in layout order and check their extents.
///
/// `views` holds one `(rgb, pointmap)` pair per condition view; pointmap
/// blocks must be present for all of them or for none.
pub fn assemble_sequence<E: Element>(
    tape: &mut Tape<E>,
    text: Option<Var>,
    target_rgb: Var,
    target_pm: Option<Var>,
    views: &[(Var, Option<Var>)],
    grid: (usize, usize),
    t: f32,
    shared_positions: bool,
) -> Result<TokenSequence> {
    let per = grid.0 * grid.1;
    let pointmap = target_pm.is_some();
    let mut parts = Vec::new();
    let text_tokens = match text {
        Some(v) => {
            parts.push(v);
            tape.shape(v)[0]
        }
        None => 0,
    };
    let mut image = vec![target_rgb];
    image.extend(target_pm);
    for (rgb, pm) in views {
        if pm.is_some() != pointmap {
            return Err(Error::shape("assemble_sequence", "pointmap blocks must be present for every view or none"));
        }
        image.push(*rgb);
        image.extend(*pm);
    }
    for v in &image {
        if tape.shape(*v).first() != Some(&per) {
            return Err(Error::shape(
                "assemble_sequence",
                format!("image block {:?} does not match grid {grid:?}", tape.shape(*v)),
            ));
        }
    }
    parts.extend(image);
    let embeddings = tape.concat_rows(&parts)?;
    let spec = LayoutSpec {
        text_tokens,
        grid,
        views: views.len(),
        pointmap,
        shared_positions,
    };
    Ok(TokenSequence {
        layout: assemble_layout(&spec, t),
        embeddings,
    })
}

/// Block exactly the (pointmap query, text key) entries.
pub fn build_attention_mask(layout: &TokenLayout) -> Mask {
    let n = layout.len();
    let mut allowed = vec![true; n * n];
    for q in 0..n {
        if layout.roles[q].domain == Domain::Pointmap {
            for k in 0..n {
                if layout.roles[k].domain == Domain::Text {
                    allowed[q * n + k] = false;
                }
            }
        }
    }
    Mask::new([n, n], allowed).expect("square mask")
}
