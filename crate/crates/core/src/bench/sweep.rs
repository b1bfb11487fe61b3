//! Tuning grids: power-of-two parameter products that pass the device
//! limit checks.

use std::fmt;
use std::str::FromStr;

use crate::device::DeviceCaps;
use crate::kernels::{validate_flash, validate_matmul, validate_matvec, FlashParams, MatmulParams, MatvecParams, OpKind, TuningParams};

pub const MAX_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Matmul,
    Matvec,
    Flash,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Matmul, Family::Matvec, Family::Flash];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Matmul => "matmul",
            Family::Matvec => "matvec",
            Family::Flash => "flash",
        })
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Family::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| format!("unknown kernel family {s:?} (matmul, matvec, flash)"))
    }
}

const P2: [u32; 4] = [1, 2, 4, 8];

/// Short label of the family's parameters in `t`.
pub fn config_label(family: Family, t: &TuningParams) -> String {
    match family {
        Family::Matmul => {
            let p = t.matmul;
            format!(
                "t{}x{}x{}_rt{}x{}_wg{}x{}",
                p.tile_m, p.tile_n, p.tile_k, p.rt_m, p.rt_n, p.wg_x, p.wg_y
            )
        }
        Family::Matvec => {
            let p = t.matvec;
            format!("wg{}_rows{}_vec{}", p.wg_size, p.rows_per_wg, p.vec)
        }
        Family::Flash => {
            let p = t.flash;
            format!("q{}_kv{}_s{}", p.q_tile, p.kv_tile, p.splits)
        }
    }
}

/// Label covering every family, for report rows.
pub fn tuning_label(t: &TuningParams) -> String {
    Family::ALL.map(|f| config_label(f, t)).join("/")
}

/// Every valid power-of-two variation of `family` on top of `base`, in a
/// fixed order. Longer grids are thinned to `limit` (at most
/// [`MAX_GRID_POINTS`]) evenly spaced points.
pub fn sweep_grid(family: Family, base: &TuningParams, caps: &DeviceCaps, head_dim: u32, limit: usize) -> Vec<TuningParams> {
    let mut grid = Vec::new();
    match family {
        Family::Matmul => {
            for wg_x in [4, 8, 16, 32] {
                for wg_y in [4, 8, 16, 32] {
                    for rt_m in P2 {
                        for rt_n in P2 {
                            for tile_k in [8, 16, 32] {
                                let p = MatmulParams {
                                    tile_m: wg_y * rt_m,
                                    tile_n: wg_x * rt_n,
                                    tile_k,
                                    rt_m,
                                    rt_n,
                                    wg_x,
                                    wg_y,
                                };
                                if validate_matmul(&p, caps).is_ok() {
                                    grid.push(TuningParams { matmul: p, ..*base });
                                }
                            }
                        }
                    }
                }
            }
        }
        Family::Matvec => {
            for wg_size in [32, 64, 128, 256] {
                for rows_per_wg in P2 {
                    for vec in [1, 2, 4] {
                        let p = MatvecParams { wg_size, rows_per_wg, vec };
                        if validate_matvec(&p, caps.subgroups, caps).is_ok() {
                            grid.push(TuningParams { matvec: p, ..*base });
                        }
                    }
                }
            }
        }
        Family::Flash => {
            for q_tile in [4, 8, 16] {
                for kv_tile in [16, 32, 64] {
                    for splits in [1, 2, 4, 8] {
                        let p = FlashParams { q_tile, kv_tile, splits };
                        let ok = [OpKind::FlashDecode, OpKind::FlashTile]
                            .iter()
                            .all(|&op| validate_flash(&p, op, head_dim, caps).is_ok());
                        if ok {
                            grid.push(TuningParams { flash: p, ..*base });
                        }
                    }
                }
            }
        }
    }
    thin(grid, limit.min(MAX_GRID_POINTS))
}

fn thin<T: Clone>(grid: Vec<T>, limit: usize) -> Vec<T> {
    if grid.len() <= limit {
        return grid;
    }
    (0..limit).map(|i| grid[i * grid.len() / limit].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thinning_keeps_order_and_bounds() {
        let v: Vec<u32> = (0..1000).collect();
        let t = thin(v, 512);
        assert_eq!(t.len(), 512);
        assert_eq!(t[0], 0);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(thin(vec![1, 2], 512), vec![1, 2]);
    }

    #[test]
    fn family_names_parse() {
        for f in Family::ALL {
            assert_eq!(f.to_string().parse::<Family>().unwrap(), f);
        }
        assert!("conv".parse::<Family>().is_err());
    }
}
