use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::rng;
use crate::supernet::{max_genotype, Genotype, SearchSpaceSpec};

/// A genotype with its two minimized objectives: negated accuracy and
/// effective FLOPs.
#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub genotype: Genotype,
    pub objectives: [f64; 2],
    pub rank: usize,
    pub crowding: f64,
    /// FNV-1a hash of the genotype JSON; final tie-breaker.
    pub hash: u64,
    genes: Vec<usize>,
}

impl Individual {
    pub fn predicted_accuracy(&self) -> f64 {
        -self.objectives[0]
    }

    pub fn effective_flops(&self) -> f64 {
        self.objectives[1]
    }

    /// Lower rank, then larger crowding, then lower hash.
    fn better(&self, other: &Self) -> Ordering {
        self.rank
            .cmp(&other.rank)
            .then_with(|| other.crowding.total_cmp(&self.crowding))
            .then_with(|| self.hash.cmp(&other.hash))
    }
}

pub fn genotype_hash(g: &Genotype) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in g.to_json().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `a` is no worse everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Fronts of indices into `points`; each front is sorted ascending.
pub fn nondominated_sort<P: AsRef<[f64]>>(points: &[P]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (points[i].as_ref(), points[j].as_ref());
            if dominates(a, b) {
                dominated_by[i].push(j);
                count[j] += 1;
            } else if dominates(b, a) {
                dominated_by[j].push(i);
                count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front` (same order as `front`).
pub fn crowding_distance<P: AsRef<[f64]>>(points: &[P], front: &[usize]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let m = points[front[0]].as_ref().len();
    let mut dist = vec![0.0; n];
    for obj in 0..m {
        let mut order: Vec<usize> = (0..n).collect();
        // full-point tie-break keeps the result independent of input order
        order.sort_by(|&a, &b| {
            let (pa, pb) = (points[front[a]].as_ref(), points[front[b]].as_ref());
            pa[obj].total_cmp(&pb[obj]).then_with(|| {
                pa.iter()
                    .zip(pb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
        });
        let val = |k: usize| points[front[order[k]]].as_ref()[obj];
        let range = val(n - 1) - val(0);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if range > 0.0 {
            for k in 1..n - 1 {
                dist[order[k]] += (val(k + 1) - val(k - 1)) / range;
            }
        }
    }
    dist
}

/// Area dominated by `points` (both objectives minimized) and bounded by
/// `reference`. Points not strictly better than the reference count for nothing.
pub fn hypervolume(points: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> = points
        .iter()
        .copied()
        .filter(|p| p[0] < reference[0] && p[1] < reference[1])
        .collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut hv = 0.0;
    let mut best_y = reference[1];
    for p in pts {
        if p[1] < best_y {
            hv += (reference[0] - p[0]) * (best_y - p[1]);
            best_y = p[1];
        }
    }
    hv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    /// Per-gene probability of taking the gene from the other parent.
    pub p_crossover: f64,
    /// Per-gene probability of resampling the gene uniformly.
    pub p_mutation: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SearchConfig {
    pub fn desk() -> Self {
        Self {
            population: 96,
            generations: 60,
            p_crossover: 0.06,
            p_mutation: 0.006,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            population: 800,
            generations: 500,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 || !self.population.is_multiple_of(2) {
            return Err(QfaError::Config(format!(
                "population must be even and at least 2, got {}",
                self.population
            )));
        }
        for (name, p) in [
            ("p_crossover", self.p_crossover),
            ("p_mutation", self.p_mutation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(QfaError::Config(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub hypervolume: f64,
    pub front_size: usize,
    pub evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    /// Rank-0 individuals of the final population, by ascending FLOPs.
    pub front: Vec<Individual>,
    pub population: Vec<Individual>,
    pub history: Vec<GenerationStats>,
    pub reference: [f64; 2],
}

/// Number of options of every gene of the fixed-length chromosome: per
/// stage the depth, then for every block slot the kernel, the expansion and
/// one weight and one activation bitwidth per conv; the resolution last.
/// Genes of inactive slots are kept so that depth changes can revive them.
fn gene_cardinalities(spec: &SearchSpaceSpec) -> Vec<usize> {
    let mut card = Vec::new();
    let bits = spec.bitwidth_options.len();
    for _ in 0..spec.stages {
        card.push(spec.depth_options().count());
        for _ in 0..spec.blocks_per_stage {
            card.push(spec.kernel_options.len());
            card.push(spec.expand_options.len());
            card.extend(std::iter::repeat_n(bits, 2 * spec.convs_per_block));
        }
    }
    card.push(spec.resolution_options.len());
    card
}

fn decode(genes: &[usize], spec: &SearchSpaceSpec) -> Genotype {
    let mut it = genes.iter().copied();
    let mut next = || it.next().expect("chromosome length matches the spec");
    let depth_options: Vec<usize> = spec.depth_options().collect();
    let mut g = Genotype {
        depths: Vec::new(),
        kernels: Vec::new(),
        expands: Vec::new(),
        wbits: Vec::new(),
        abits: Vec::new(),
        resolution: 0,
    };
    for _ in 0..spec.stages {
        let depth = depth_options[next()];
        let (mut ks, mut es, mut ws, mut as_) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for slot in 0..spec.blocks_per_stage {
            let k = spec.kernel_options[next()];
            let e = spec.expand_options[next()];
            let w: Vec<_> = (0..spec.convs_per_block)
                .map(|_| spec.bitwidth_options[next()])
                .collect();
            let a: Vec<_> = (0..spec.convs_per_block)
                .map(|_| spec.bitwidth_options[next()])
                .collect();
            if slot < depth {
                ks.push(k);
                es.push(e);
                ws.push(w);
                as_.push(a);
            }
        }
        g.depths.push(depth);
        g.kernels.push(ks);
        g.expands.push(es);
        g.wbits.push(ws);
        g.abits.push(as_);
    }
    g.resolution = next();
    g
}

/// Chromosome of a valid genotype; inactive slots are filled at random.
fn encode<R: Rng + ?Sized>(
    g: &Genotype,
    spec: &SearchSpaceSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    g.validate(spec)?;
    let index = |opts: &[usize], v: usize| opts.iter().position(|&o| o == v).expect("validated");
    let bit_index = |v| {
        spec.bitwidth_options
            .iter()
            .position(|&o| o == v)
            .expect("validated")
    };
    let nb = spec.bitwidth_options.len();
    let mut genes = Vec::new();
    for st in 0..spec.stages {
        genes.push(index(
            &spec.depth_options().collect::<Vec<_>>(),
            g.depths[st],
        ));
        for slot in 0..spec.blocks_per_stage {
            if slot < g.depths[st] {
                genes.push(index(&spec.kernel_options, g.kernels[st][slot]));
                genes.push(index(&spec.expand_options, g.expands[st][slot]));
                genes.extend(g.wbits[st][slot].iter().map(|&b| bit_index(b)));
                genes.extend(g.abits[st][slot].iter().map(|&b| bit_index(b)));
            } else {
                genes.push(rng.gen_range(0..spec.kernel_options.len()));
                genes.push(rng.gen_range(0..spec.expand_options.len()));
                genes.extend((0..2 * spec.convs_per_block).map(|_| rng.gen_range(0..nb)));
            }
        }
    }
    genes.push(g.resolution);
    Ok(genes)
}

struct Evaluator<'a> {
    accuracy: &'a dyn Fn(&Genotype) -> Result<f64>,
    complexity: &'a dyn Fn(&Genotype) -> Result<f64>,
    cache: HashMap<Genotype, [f64; 2]>,
}

impl Evaluator<'_> {
    fn individual(&mut self, genes: Vec<usize>, spec: &SearchSpaceSpec) -> Result<Individual> {
        let genotype = decode(&genes, spec);
        let objectives = match self.cache.get(&genotype) {
            Some(o) => *o,
            None => {
                let acc = (self.accuracy)(&genotype)?;
                let flops = (self.complexity)(&genotype)?;
                if !acc.is_finite() || !flops.is_finite() {
                    return Err(QfaError::Validation(format!(
                        "objectives must be finite, got accuracy {acc} and FLOPs {flops}"
                    )));
                }
                let o = [-acc, flops];
                self.cache.insert(genotype.clone(), o);
                o
            }
        };
        Ok(Individual {
            hash: genotype_hash(&genotype),
            genotype,
            objectives,
            rank: 0,
            crowding: 0.0,
            genes,
        })
    }
}

/// Sets rank and crowding of every individual from its own population.
fn assign_fitness(pop: &mut [Individual]) {
    let points: Vec<[f64; 2]> = pop.iter().map(|i| i.objectives).collect();
    for (rank, front) in nondominated_sort(&points).iter().enumerate() {
        let crowd = crowding_distance(&points, front);
        for (&i, c) in front.iter().zip(crowd) {
            pop[i].rank = rank;
            pop[i].crowding = c;
        }
    }
}

/// `(μ+λ)` truncation: whole fronts while they fit, then the most crowded-apart
/// members of the first front that does not.
fn environmental_selection(merged: Vec<Individual>, mu: usize) -> Vec<Individual> {
    let points: Vec<[f64; 2]> = merged.iter().map(|i| i.objectives).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(mu);
    for front in nondominated_sort(&points) {
        if chosen.len() + front.len() <= mu {
            chosen.extend(&front);
            continue;
        }
        let crowd = crowding_distance(&points, &front);
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| {
            crowd[b]
                .total_cmp(&crowd[a])
                .then_with(|| merged[front[a]].hash.cmp(&merged[front[b]].hash))
        });
        let room = mu - chosen.len();
        chosen.extend(order.into_iter().take(room).map(|k| front[k]));
        break;
    }
    chosen.sort_unstable();
    let mut keep = vec![false; merged.len()];
    chosen.iter().for_each(|&i| keep[i] = true);
    let mut survivors: Vec<Individual> = merged
        .into_iter()
        .zip(keep)
        .filter_map(|(ind, k)| k.then_some(ind))
        .collect();
    assign_fitness(&mut survivors);
    survivors
}

fn tournament<'a, R: Rng + ?Sized>(pop: &'a [Individual], rng: &mut R) -> &'a Individual {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    if a.better(b).is_le() {
        a
    } else {
        b
    }
}

fn front_stats(
    pop: &[Individual],
    reference: [f64; 2],
    generation: usize,
    evaluations: usize,
) -> GenerationStats {
    let front: Vec<[f64; 2]> = pop
        .iter()
        .filter(|i| i.rank == 0)
        .map(|i| i.objectives)
        .collect();
    GenerationStats {
        generation,
        hypervolume: hypervolume(&front, reference),
        front_size: front.len(),
        evaluations,
    }
}

/// NSGA-II over genotypes of `spec`, maximizing `accuracy` and minimizing
/// `complexity`.
///
/// Duplicate genotypes are never admitted, so a space smaller than the
/// population yields a smaller population. The hypervolume reference is
/// `(0, 1.1 · max(complexity))` over the initial population and the
/// widest/highest-precision genotype.
pub fn evolve(
    cfg: &SearchConfig,
    spec: &SearchSpaceSpec,
    accuracy: &dyn Fn(&Genotype) -> Result<f64>,
    complexity: &dyn Fn(&Genotype) -> Result<f64>,
) -> Result<SearchResult> {
    cfg.validate()?;
    spec.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let card = gene_cardinalities(spec);
    let mut eval = Evaluator {
        accuracy,
        complexity,
        cache: HashMap::new(),
    };
    let max_attempts = 20 * cfg.population;

    let mut seen: HashSet<Genotype> = HashSet::new();
    let mut pop = Vec::with_capacity(cfg.population);
    for _ in 0..max_attempts {
        if pop.len() == cfg.population {
            break;
        }
        let genes: Vec<usize> = card.iter().map(|&c| rng.gen_range(0..c)).collect();
        let ind = eval.individual(genes, spec)?;
        if seen.insert(ind.genotype.clone()) {
            pop.push(ind);
        }
    }
    assign_fitness(&mut pop);

    let top_bits = *spec
        .bitwidth_options
        .last()
        .expect("validated spec has bitwidths");
    let mut widest = complexity(&max_genotype(spec, top_bits))?;
    for i in &pop {
        widest = widest.max(i.objectives[1]);
    }
    let reference = [0.0, 1.1 * widest];
    let mut history = vec![front_stats(&pop, reference, 0, eval.cache.len())];

    for generation in 1..=cfg.generations {
        let mut offspring: Vec<Individual> = Vec::with_capacity(cfg.population);
        let mut attempts = 0;
        while offspring.len() < cfg.population && attempts < max_attempts {
            attempts += 1;
            let (p1, p2) = (tournament(&pop, &mut rng), tournament(&pop, &mut rng));
            let (mut c1, mut c2) = (p1.genes.clone(), p2.genes.clone());
            for k in 0..card.len() {
                if rng.gen_bool(cfg.p_crossover) {
                    std::mem::swap(&mut c1[k], &mut c2[k]);
                }
            }
            for child in [&mut c1, &mut c2] {
                for (gene, &c) in child.iter_mut().zip(&card) {
                    if rng.gen_bool(cfg.p_mutation) {
                        *gene = rng.gen_range(0..c);
                    }
                }
            }
            for genes in [c1, c2] {
                if offspring.len() == cfg.population {
                    break;
                }
                let ind = eval.individual(genes, spec)?;
                if seen.insert(ind.genotype.clone()) {
                    offspring.push(ind);
                }
            }
        }
        let mu = cfg.population.min(pop.len() + offspring.len());
        pop.extend(offspring);
        pop = environmental_selection(pop, mu);
        history.push(front_stats(&pop, reference, generation, eval.cache.len()));
    }

    let mut front: Vec<Individual> = pop.iter().filter(|i| i.rank == 0).cloned().collect();
    front.sort_by(|a, b| {
        a.objectives[1]
            .total_cmp(&b.objectives[1])
            .then(a.hash.cmp(&b.hash))
    });
    Ok(SearchResult {
        front,
        population: pop,
        history,
        reference,
    })
}

/// Seeds a chromosome from an existing genotype, e.g. to resume a search.
pub fn chromosome_roundtrip(g: &Genotype, spec: &SearchSpaceSpec, seed: u64) -> Result<Genotype> {
    let genes = encode(g, spec, &mut rng::seeded(seed))?;
    Ok(decode(&genes, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::sample_uniform;

    #[test]
    fn sort_examples() {
        assert_eq!(
            nondominated_sort(&[[1.0, 1.0], [2.0, 2.0]]),
            vec![vec![0], vec![1]]
        );
        assert_eq!(
            nondominated_sort(&[[1.0, 2.0], [2.0, 1.0]]),
            vec![vec![0, 1]]
        );
        // equal points do not dominate each other
        assert_eq!(
            nondominated_sort(&[[1.0, 1.0], [1.0, 1.0]]),
            vec![vec![0, 1]]
        );
    }

    #[test]
    fn crowding_examples() {
        let pts = [[0.0, 2.0], [1.0, 1.0], [2.0, 0.0]];
        assert_eq!(
            crowding_distance(&pts[..2], &[0, 1]),
            vec![f64::INFINITY; 2]
        );
        let d = crowding_distance(&pts, &[0, 1, 2]);
        // (2 - 0)/2 per objective
        assert_eq!(d, vec![f64::INFINITY, 2.0, f64::INFINITY]);
    }

    #[test]
    fn hypervolume_of_a_staircase() {
        let pts = [[1.0, 3.0], [2.0, 2.0], [3.0, 1.0], [3.5, 3.5]];
        // boxes to (4,4): 3·1 + 2·1 + 1·1
        assert_eq!(hypervolume(&pts, [4.0, 4.0]), 6.0);
        assert_eq!(hypervolume(&[], [4.0, 4.0]), 0.0);
    }

    #[test]
    fn chromosome_preserves_genotypes() {
        let spec = SearchSpaceSpec::desk();
        let mut r = rng::seeded(3);
        for i in 0..50 {
            let g = sample_uniform(&spec, &mut r);
            assert_eq!(chromosome_roundtrip(&g, &spec, i).unwrap(), g);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::desk().validate().is_ok());
        assert!(SearchConfig::paper().validate().is_ok());
        assert!(SearchConfig {
            population: 7,
            ..SearchConfig::desk()
        }
        .validate()
        .is_err());
        assert!(SearchConfig {
            p_mutation: 1.5,
            ..SearchConfig::desk()
        }
        .validate()
        .is_err());
    }
}
