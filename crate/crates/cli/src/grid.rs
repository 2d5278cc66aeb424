//! Class-count grids: `8:512:x2` (geometric), `10:50:+10` (arithmetic), `4,16,64` or a single value.

pub fn parse_grid(s: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("bad grid '{s}'");
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
    let parts: Vec<&str> = s.split(':').collect();
    let grid = match parts.as_slice() {
        [single] => single.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        [lo, hi, step] => {
            let (lo, hi) = (num(lo)?, num(hi)?);
            let (op, by) = step.split_at(step.len().min(1));
            let by = num(by)?;
            let next: Box<dyn Fn(usize) -> usize> = match op {
                "x" if by >= 2 => Box::new(move |c| c * by),
                "+" if by >= 1 => Box::new(move |c| c + by),
                _ => return Err(bad()),
            };
            if lo == 0 || lo > hi {
                return Err(bad());
            }
            std::iter::successors(Some(lo), |&c| Some(next(c)))
                .take_while(|&c| c <= hi)
                .collect()
        }
        _ => return Err(bad()),
    };
    if grid.is_empty() {
        return Err(bad());
    }
    Ok(grid)
}
