//! Discretized test objective with a known optimum, used to check the search loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::search::SearchSpace;

/// A `dims`-dimensional grid with `levels` points per axis, encoded into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpace {
    pub dims: usize,
    pub levels: usize,
}

impl GridSpace {
    pub fn new(dims: usize, levels: usize) -> Self {
        assert!(dims >= 1 && levels >= 2, "grid needs at least one axis with two levels");
        Self { dims, levels }
    }

    pub fn size(&self) -> usize {
        self.levels.pow(self.dims as u32)
    }

    /// Every grid point in lexicographic order.
    pub fn all_points(&self) -> Vec<Vec<usize>> {
        (0..self.size())
            .map(|mut k| {
                (0..self.dims)
                    .map(|_| {
                        let v = k % self.levels;
                        k /= self.levels;
                        v
                    })
                    .collect()
            })
            .collect()
    }
}

impl SearchSpace for GridSpace {
    type Point = Vec<usize>;

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..self.dims).map(|_| rng.random_range(0..self.levels)).collect()
    }

    /// Moves one coordinate by ±1 or ±2 levels, clamped to the grid.
    fn mutate(&self, p: &Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut q = p.clone();
        let d = rng.random_range(0..self.dims);
        let step = [-2i64, -1, 1, 2][rng.random_range(0..4)];
        q[d] = (q[d] as i64 + step).clamp(0, self.levels as i64 - 1) as usize;
        if q == *p {
            q[d] = if p[d] == 0 { 1 } else { p[d] - 1 };
        }
        q
    }

    fn encode(&self, p: &Vec<usize>) -> Vec<f64> {
        p.iter().map(|&v| v as f64 / (self.levels - 1) as f64).collect()
    }
}

/// Sum of Gaussian bumps; the tallest one is the planted optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedObjective {
    pub peaks: Vec<(Vec<f64>, f64, f64)>,
}

impl PlantedObjective {
    /// Main peak of height 1 plus a narrower decoy of height 0.6.
    pub fn standard() -> Self {
        Self {
            peaks: vec![
                (vec![0.7, 0.2, 0.5, 0.8], 1.0, 0.35),
                (vec![0.2, 0.8, 0.3, 0.3], 0.6, 0.15),
            ],
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.peaks
            .iter()
            .map(|(c, h, s)| {
                let d2: f64 = c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                h * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    }

    /// Exhaustive maximum over the grid.
    pub fn grid_optimum(&self, space: &GridSpace) -> (Vec<usize>, f64) {
        space
            .all_points()
            .into_iter()
            .map(|p| {
                let v = self.value(&space.encode(&p));
                (p, v)
            })
            .fold((Vec::new(), f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_enumeration_is_complete() {
        let g = GridSpace::new(2, 3);
        let pts = g.all_points();
        assert_eq!(pts.len(), 9);
        assert!(pts.contains(&vec![2, 1]));
    }

    #[test]
    fn mutation_moves_and_stays_on_grid() {
        let g = GridSpace::new(4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = g.sample(&mut rng);
            let q = g.mutate(&p, &mut rng);
            assert_ne!(p, q);
            assert!(q.iter().all(|&v| v < 11));
        }
    }

    #[test]
    fn optimum_sits_on_main_peak() {
        let f = PlantedObjective::standard();
        let (p, v) = f.grid_optimum(&GridSpace::new(4, 11));
        assert_eq!(p, vec![7, 2, 5, 8]);
        assert!(v > 1.0 && v < 1.01);
    }
}
