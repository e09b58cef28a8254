//! Synthetic in-context grid tasks and the similarity-retrieval baseline.
//!
//! Token layout of the shared vocabulary: 0 is the mask token, `1..=G` are
//! gray levels, `G+1..=G+C` are colours; edge maps reuse `{0, 1}`. Content
//! grids are mosaics of aligned 2x2 blocks so that neighbouring cells carry
//! information about each other.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::numkernel::{derive_seed, kernels, Rng, Tensor};
use crate::{Error, Result};

pub const MASK_TOKEN: u32 = 0;
const BLOCK: usize = 2;

/// H x W grid of palette values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridImage {
    height: usize,
    width: usize,
    cells: Vec<u32>,
}

impl GridImage {
    pub fn new(height: usize, width: usize, cells: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("grid must be non-empty, got {height}x{width}")));
        }
        if cells.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} grid needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(GridImage {
            height,
            width,
            cells,
        })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::shape("ragged grid rows"));
        }
        GridImage::new(rows.len(), w, rows.concat())
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        GridImage {
            height,
            width,
            cells: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.cells[r * self.width + c]
    }

    fn set(&mut self, r: usize, c: usize, v: u32) {
        self.cells[r * self.width + c] = v;
    }

    /// Checks the palette invariant against a vocabulary size.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.cells.iter().find(|&&c| c as usize >= vocab) {
            Some(&token) => Err(Error::Vocabulary { token, vocab }),
            None => Ok(()),
        }
    }
}

/// The three in-context tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Colorize,
    Inpaint,
    Edge,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Colorize, Task::Inpaint, Task::Edge];

    pub fn name(self) -> &'static str {
        match self {
            Task::Colorize => "colorize",
            Task::Inpaint => "inpaint",
            Task::Edge => "edge",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Task::Colorize => 1,
            Task::Inpaint => 2,
            Task::Edge => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown task `{s}` (colorize, inpaint, edge)")))
    }
}

/// Grid geometry and palette shared by every image of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub gray_levels: usize,
    pub colors: usize,
    pub vocab: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            height: 8,
            width: 8,
            gray_levels: 4,
            colors: 8,
            vocab: 32,
        }
    }
}

impl GridSpec {
    pub fn tokens_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn gray_token(&self, level: usize) -> u32 {
        (1 + level) as u32
    }

    pub fn color_token(&self, index: usize) -> u32 {
        (1 + self.gray_levels + index) as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Domain("grid height and width must be >= 1".into()));
        }
        if self.gray_levels == 0 || self.colors < self.gray_levels {
            return Err(Error::Domain(format!(
                "need 1 <= gray levels ({}) <= colours ({})",
                self.gray_levels, self.colors
            )));
        }
        if 1 + self.gray_levels + self.colors > self.vocab {
            return Err(Error::Domain(format!(
                "palette of {} tokens does not fit vocabulary {}",
                1 + self.gray_levels + self.colors,
                self.vocab
            )));
        }
        Ok(())
    }
}

/// Injective gray-level to colour table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorMap {
    table: BTreeMap<u32, u32>,
}

impl ColorMap {
    pub fn new(pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let table: BTreeMap<u32, u32> = pairs.into_iter().collect();
        let mut images: Vec<u32> = table.values().copied().collect();
        images.sort_unstable();
        images.dedup();
        if images.len() != table.len() {
            return Err(Error::Domain("colour map is not injective".into()));
        }
        Ok(ColorMap { table })
    }

    pub fn get(&self, gray: u32) -> Option<u32> {
        self.table.get(&gray).copied()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Replaces every gray cell with its mapped colour.
pub fn apply_colorize(gray: &GridImage, mapping: &ColorMap) -> Result<GridImage> {
    let cells = gray
        .cells
        .iter()
        .map(|&c| {
            mapping
                .get(c)
                .ok_or_else(|| Error::Domain(format!("cell value {c} is outside the gray sub-palette")))
        })
        .collect::<Result<Vec<_>>>()?;
    GridImage::new(gray.height, gray.width, cells)
}

/// Axis-aligned rectangle `(r0, c0, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Sets the cells inside `rect` to `mask_token`.
pub fn apply_inpaint_mask(full: &GridImage, rect: Rect, mask_token: u32) -> Result<GridImage> {
    if rect.row + rect.height > full.height || rect.col + rect.width > full.width {
        return Err(Error::Bounds(format!(
            "rect {rect:?} exceeds {}x{} grid",
            full.height, full.width
        )));
    }
    let mut out = full.clone();
    for r in rect.row..rect.row + rect.height {
        for c in rect.col..rect.col + rect.width {
            out.set(r, c, mask_token);
        }
    }
    Ok(out)
}

/// Binary edge map: 1 where the right or bottom neighbour differs.
pub fn apply_edge(img: &GridImage) -> GridImage {
    let mut out = GridImage::filled(img.height, img.width, 0);
    for r in 0..img.height {
        for c in 0..img.width {
            let v = img.get(r, c);
            let right = c + 1 < img.width && img.get(r, c + 1) != v;
            let below = r + 1 < img.height && img.get(r + 1, c) != v;
            if right || below {
                out.set(r, c, 1);
            }
        }
    }
    out
}

/// One in-context problem: K demonstration pairs plus a query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub task: Task,
    pub demos: Vec<(GridImage, GridImage)>,
    pub query: GridImage,
    pub target: GridImage,
    pub seed: u64,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.demos.len()
    }

    /// Same episode with only the first `k` demonstrations.
    pub fn with_k(&self, k: usize) -> Result<Episode> {
        if k == 0 || k > self.demos.len() {
            return Err(Error::Domain(format!(
                "cannot take {k} demos from an episode with {}",
                self.demos.len()
            )));
        }
        Ok(Episode {
            demos: self.demos[..k].to_vec(),
            ..self.clone()
        })
    }

    pub fn images(&self) -> impl Iterator<Item = &GridImage> {
        self.demos
            .iter()
            .flat_map(|(x, y)| [x, y])
            .chain([&self.query, &self.target])
    }
}

fn mosaic(rng: &mut Rng, spec: &GridSpec, palette: &[u32]) -> GridImage {
    let bh = spec.height.div_ceil(BLOCK);
    let bw = spec.width.div_ceil(BLOCK);
    let blocks: Vec<u32> = (0..bh * bw).map(|_| palette[rng.below(palette.len())]).collect();
    let mut img = GridImage::filled(spec.height, spec.width, 0);
    for r in 0..spec.height {
        for c in 0..spec.width {
            img.set(r, c, blocks[(r / BLOCK) * bw + c / BLOCK]);
        }
    }
    img
}

fn gray_mosaic_covering(rng: &mut Rng, spec: &GridSpec, grays: &[u32]) -> GridImage {
    // A grid too small to hold every level is accepted after a few tries.
    for _ in 0..64 {
        let img = mosaic(rng, spec, grays);
        if grays.iter().all(|g| img.cells.contains(g)) {
            return img;
        }
    }
    mosaic(rng, spec, grays)
}

/// Deterministic episode generator: a pure function of `(task, k, seed)` and
/// the grid spec.
pub fn gen_episode(task: Task, k: usize, seed: u64, spec: &GridSpec) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Domain("K must be >= 1".into()));
    }
    spec.validate()?;
    let mut rng = Rng::new(derive_seed(seed, task.stream()));
    let grays: Vec<u32> = (0..spec.gray_levels).map(|i| spec.gray_token(i)).collect();
    let colors: Vec<u32> = (0..spec.colors).map(|i| spec.color_token(i)).collect();

    let make_pair: Box<dyn Fn(&mut Rng) -> Result<(GridImage, GridImage)>> = match task {
        Task::Colorize => {
            let mut shuffled = colors.clone();
            rng.shuffle(&mut shuffled);
            let map = ColorMap::new(grays.iter().copied().zip(shuffled))?;
            let grays = grays.clone();
            Box::new(move |rng| {
                let x = gray_mosaic_covering(rng, spec, &grays);
                let y = apply_colorize(&x, &map)?;
                Ok((x, y))
            })
        }
        Task::Inpaint => {
            let max_h = (spec.height / 2).max(1);
            let max_w = (spec.width / 2).max(1);
            let h = rng.range_inclusive(2.min(max_h), max_h);
            let w = rng.range_inclusive(2.min(max_w), max_w);
            let rect = Rect {
                row: rng.below(spec.height - h + 1),
                col: rng.below(spec.width - w + 1),
                height: h,
                width: w,
            };
            let colors = colors.clone();
            Box::new(move |rng| {
                let y = mosaic(rng, spec, &colors);
                let x = apply_inpaint_mask(&y, rect, MASK_TOKEN)?;
                Ok((x, y))
            })
        }
        Task::Edge => {
            let colors = colors.clone();
            Box::new(move |rng| {
                let x = mosaic(rng, spec, &colors);
                let y = apply_edge(&x);
                Ok((x, y))
            })
        }
    };
    let demos = (0..k).map(|_| make_pair(&mut rng)).collect::<Result<Vec<_>>>()?;
    let (query, target) = make_pair(&mut rng)?;
    Ok(Episode {
        task,
        demos,
        query,
        target,
        seed,
    })
}

/// Dataset split; each owns a disjoint range of episode seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Seed of the `index`-th episode of this split for a run seed. The split
    /// occupies the top byte, the run seed the next 32 bits and the index
    /// the low 24 bits, so splits never share a seed.
    pub fn episode_seed(self, run_seed: u64, index: usize) -> u64 {
        let tag = match self {
            Split::Train => 1u64,
            Split::Val => 2,
            Split::Test => 3,
        };
        assert!(index < (1 << 24), "episode index out of range");
        (tag << 56) | ((run_seed & 0xFFFF_FFFF) << 24) | index as u64
    }
}

/// A generated split of episodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodePool {
    pub split: Split,
    pub episodes: Vec<Episode>,
}

impl EpisodePool {
    pub fn generate(
        task: Task,
        k: usize,
        split: Split,
        run_seed: u64,
        count: usize,
        spec: &GridSpec,
    ) -> Result<Self> {
        let episodes = (0..count)
            .map(|i| gen_episode(task, k, split.episode_seed(run_seed, i), spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(EpisodePool { split, episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

fn mean_embedding(img: &GridImage, embed: &Tensor) -> Result<Vec<f64>> {
    let d = embed.cols();
    let mut acc = vec![0.0; d];
    for &c in img.cells() {
        if c as usize >= embed.rows() {
            return Err(Error::Vocabulary {
                token: c,
                vocab: embed.rows(),
            });
        }
        for (a, e) in acc.iter_mut().zip(embed.row(c as usize)) {
            *a += e;
        }
    }
    let n = img.cells().len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = kernels::norm(a) * kernels::norm(b);
    if denom == 0.0 {
        0.0
    } else {
        kernels::dot(a, b) / denom
    }
}

/// Similarity-search context retrieval.
///
/// Candidates are the `(query, target)` pairs of the pool's episodes. Returns
/// the pool indices of the `k` candidates whose mean token embedding is most
/// cosine-similar to the query's, best first; ties go to the lower index.
pub fn retrieve_context(
    query: &GridImage,
    pool: &EpisodePool,
    k: usize,
    embed: &Tensor,
) -> Result<Vec<usize>> {
    if pool.len() < k || pool.is_empty() {
        return Err(Error::InsufficientPool {
            requested: k,
            available: pool.len(),
        });
    }
    let q = mean_embedding(query, embed)?;
    let mut scored = pool
        .episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| Ok((i, cosine_similarity(&q, &mean_embedding(&ep.query, embed)?))))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(i, _)| i).collect())
}

/// Episode with its demonstrations replaced by retrieved pool pairs.
pub fn with_retrieved_context(
    episode: &Episode,
    pool: &EpisodePool,
    embed: &Tensor,
) -> Result<Episode> {
    let idx = retrieve_context(&episode.query, pool, episode.k(), embed)?;
    let demos = idx
        .into_iter()
        .map(|i| (pool.episodes[i].query.clone(), pool.episodes[i].target.clone()))
        .collect();
    Ok(Episode {
        demos,
        ..episode.clone()
    })
}

/// One episode per line: `task,K,H,W,seed,cells...` with cells of
/// x1,y1,...,xK,yK,x_q,y_gt in row-major order.
pub fn episode_to_line(ep: &Episode) -> String {
    let (h, w) = (ep.query.height(), ep.query.width());
    let mut out = format!("{},{},{},{},{}", ep.task, ep.k(), h, w, ep.seed);
    for img in ep.images() {
        for c in img.cells() {
            out.push(',');
            out.push_str(&c.to_string());
        }
    }
    out
}

pub fn episode_from_line(line: &str, line_no: usize) -> Result<Episode> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.trim_end_matches('\r').split(',').collect();
    if fields.len() < 5 {
        return Err(err("expected task,K,H,W,seed,cells...".into()));
    }
    let task: Task = fields[0].parse().map_err(|e: Error| err(e.to_string()))?;
    let num = |i: usize| -> Result<u64> {
        fields[i]
            .parse::<u64>()
            .map_err(|_| err(format!("field {i} `{}` is not an integer", fields[i])))
    };
    let (k, h, w, seed) = (num(1)? as usize, num(2)? as usize, num(3)? as usize, num(4)?);
    let t = h * w;
    let expected = 5 + (2 * k + 2) * t;
    if k == 0 || t == 0 || fields.len() != expected {
        return Err(err(format!(
            "expected {expected} fields for K={k}, {h}x{w}; found {}",
            fields.len()
        )));
    }
    let cells = fields[5..]
        .iter()
        .map(|f| f.parse::<u32>().map_err(|_| err(format!("bad cell `{f}`"))))
        .collect::<Result<Vec<_>>>()?;
    let mut grids = cells
        .chunks(t)
        .map(|c| GridImage::new(h, w, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let target = grids.pop().expect("at least two grids");
    let query = grids.pop().expect("at least two grids");
    let mut demos = Vec::with_capacity(k);
    let mut it = grids.into_iter();
    while let (Some(x), Some(y)) = (it.next(), it.next()) {
        demos.push((x, y));
    }
    Ok(Episode {
        task,
        demos,
        query,
        target,
        seed,
    })
}

pub fn write_episodes(episodes: &[Episode]) -> String {
    let mut s = String::new();
    for ep in episodes {
        s.push_str(&episode_to_line(ep));
        s.push('\n');
    }
    s
}

pub fn read_episodes(text: &str) -> Result<Vec<Episode>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| episode_from_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(rows: &[&[u32]]) -> GridImage {
        GridImage::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn colorize_examples() {
        let map = ColorMap::new([(0, 5), (1, 9)]).unwrap();
        let out = apply_colorize(&g(&[&[0, 1], &[1, 0]]), &map).unwrap();
        assert_eq!(out, g(&[&[5, 9], &[9, 5]]));

        let id = ColorMap::new((0..4).map(|v| (v, v))).unwrap();
        let img = g(&[&[0, 1, 2], &[3, 2, 1]]);
        assert_eq!(apply_colorize(&img, &id).unwrap(), img);

        assert!(matches!(
            apply_colorize(&g(&[&[7]]), &map),
            Err(Error::Domain(_))
        ));
        assert!(ColorMap::new([(0, 5), (1, 5)]).is_err());
    }

    #[test]
    fn colorize_random_grid_per_cell() {
        let spec = GridSpec::default();
        let mut rng = Rng::new(11);
        let map = ColorMap::new((0..4).map(|i| (spec.gray_token(i), spec.color_token(7 - i)))).unwrap();
        let cells: Vec<u32> = (0..64).map(|_| spec.gray_token(rng.below(4))).collect();
        let img = GridImage::new(8, 8, cells).unwrap();
        let out = apply_colorize(&img, &map).unwrap();
        for (a, b) in img.cells().iter().zip(out.cells()) {
            assert_eq!(map.get(*a), Some(*b));
        }
    }

    #[test]
    fn inpaint_examples() {
        let img = g(&[&[5, 6], &[7, 8]]);
        let zero = Rect { row: 1, col: 1, height: 0, width: 0 };
        assert_eq!(apply_inpaint_mask(&img, zero, 0).unwrap(), img);
        let all = Rect { row: 0, col: 0, height: 2, width: 2 };
        assert_eq!(apply_inpaint_mask(&img, all, 0).unwrap(), GridImage::filled(2, 2, 0));
        let bad = Rect { row: 1, col: 0, height: 2, width: 1 };
        assert!(matches!(apply_inpaint_mask(&img, bad, 0), Err(Error::Bounds(_))));
    }

    #[test]
    fn inpaint_random_rect_predicate() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let cells: Vec<u32> = (0..64).map(|_| 5 + rng.below(8) as u32).collect();
            let img = GridImage::new(8, 8, cells).unwrap();
            let (h, w) = (rng.below(9), rng.below(9));
            let rect = Rect { row: rng.below(9 - h), col: rng.below(9 - w), height: h, width: w };
            let out = apply_inpaint_mask(&img, rect, 0).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    let inside = r >= rect.row && r < rect.row + h && c >= rect.col && c < rect.col + w;
                    if inside {
                        assert_eq!(out.get(r, c), 0);
                    } else {
                        assert_eq!(out.get(r, c), img.get(r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn edge_examples() {
        assert_eq!(apply_edge(&GridImage::filled(3, 4, 6)), GridImage::filled(3, 4, 0));
        assert_eq!(apply_edge(&g(&[&[5, 5], &[5, 9]])), g(&[&[0, 1], &[1, 0]]));
        assert_eq!(apply_edge(&g(&[&[7]])), g(&[&[0]]));
    }

    #[test]
    fn episodes_are_deterministic_and_consistent() {
        let spec = GridSpec::default();
        for task in Task::ALL {
            let a = gen_episode(task, 4, 99, &spec).unwrap();
            let b = gen_episode(task, 4, 99, &spec).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, gen_episode(task, 4, 100, &spec).unwrap());
            for img in a.images() {
                img.validate(spec.vocab).unwrap();
            }
        }
        let edge = gen_episode(Task::Edge, 3, 1, &spec).unwrap();
        assert_eq!(edge.target, apply_edge(&edge.query));
    }

    #[test]
    fn colorize_mapping_recoverable_from_demos() {
        let spec = GridSpec::default();
        for seed in 0..30 {
            let ep = gen_episode(Task::Colorize, 4, seed, &spec).unwrap();
            let mut recovered = BTreeMap::new();
            for (x, y) in &ep.demos {
                // every demo covers all gray levels
                for lvl in 0..spec.gray_levels {
                    assert!(x.cells().contains(&spec.gray_token(lvl)));
                }
                for (a, b) in x.cells().iter().zip(y.cells()) {
                    assert_eq!(*recovered.entry(*a).or_insert(*b), *b);
                }
            }
            let map = ColorMap::new(recovered).unwrap();
            assert_eq!(apply_colorize(&ep.query, &map).unwrap(), ep.target);
        }
    }

    #[test]
    fn inpaint_shares_mask_geometry() {
        let spec = GridSpec::default();
        let ep = gen_episode(Task::Inpaint, 4, 17, &spec).unwrap();
        let masked = |img: &GridImage| -> Vec<bool> { img.cells().iter().map(|&c| c == MASK_TOKEN).collect() };
        let m = masked(&ep.query);
        assert!(m.iter().filter(|&&b| b).count() >= 4);
        for (x, _) in &ep.demos {
            assert_eq!(masked(x), m);
        }
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let a = Split::Train.episode_seed(7, 5);
        let b = Split::Test.episode_seed(7, 5);
        let c = Split::Val.episode_seed(7, 5);
        assert!(a != b && b != c && a != c);
        assert_eq!(Split::Train.episode_seed(7, 5), a);
    }

    #[test]
    fn line_format_round_trip() {
        let spec = GridSpec { height: 2, width: 3, ..GridSpec::default() };
        let ep = gen_episode(Task::Inpaint, 2, 3, &spec).unwrap();
        let line = episode_to_line(&ep);
        assert!(line.starts_with("inpaint,2,2,3,3,"));
        assert_eq!(line.split(',').count(), 5 + 6 * 6);
        assert_eq!(episode_from_line(&line, 1).unwrap(), ep);
        let text = write_episodes(&[ep.clone(), ep.clone()]);
        assert!(text.ends_with('\n') && !text.contains('\r'));
        assert_eq!(read_episodes(&text).unwrap(), vec![ep.clone(), ep]);
        assert!(matches!(episode_from_line("edge,1,2,2,0,1", 4), Err(Error::Parse { line: 4, .. })));
    }

    fn random_embed(rng: &mut Rng, v: usize, d: usize) -> Tensor {
        Tensor::new(vec![v, d], (0..v * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn retrieval_ranks_duplicate_first_and_matches_brute_force() {
        let spec = GridSpec::default();
        let mut rng = Rng::new(21);
        let embed = random_embed(&mut rng, spec.vocab, 16);
        let pool = EpisodePool::generate(Task::Inpaint, 1, Split::Train, 0, 20, &spec).unwrap();

        let query = pool.episodes[13].query.clone();
        assert_eq!(retrieve_context(&query, &pool, 3, &embed).unwrap()[0], 13);

        let all = retrieve_context(&query, &pool, 20, &embed).unwrap();
        assert_eq!(all.len(), 20);

        // Brute force: exhaustive pairwise ordering by similarity.
        let other = gen_episode(Task::Inpaint, 1, 12345, &spec).unwrap().query;
        let got = retrieve_context(&other, &pool, 5, &embed).unwrap();
        let mean = |img: &GridImage| -> Vec<f64> {
            let mut m = vec![0.0; 16];
            for &c in img.cells() {
                for j in 0..16 {
                    m[j] += embed.get(c as usize, j) / 64.0;
                }
            }
            m
        };
        let q = mean(&other);
        let sims: Vec<f64> = pool
            .episodes
            .iter()
            .map(|e| {
                let c = mean(&e.query);
                let dot: f64 = q.iter().zip(&c).map(|(a, b)| a * b).sum();
                dot / (q.iter().map(|a| a * a).sum::<f64>().sqrt() * c.iter().map(|a| a * a).sum::<f64>().sqrt())
            })
            .collect();
        let mut expected = Vec::new();
        let mut used = [false; 20];
        for _ in 0..5 {
            let mut best = None;
            for i in 0..20 {
                if !used[i] && best.is_none_or(|b: usize| sims[i] > sims[b]) {
                    best = Some(i);
                }
            }
            used[best.unwrap()] = true;
            expected.push(best.unwrap());
        }
        assert_eq!(got, expected);

        assert!(matches!(
            retrieve_context(&other, &pool, 21, &embed),
            Err(Error::InsufficientPool { requested: 21, available: 20 })
        ));
    }
}
