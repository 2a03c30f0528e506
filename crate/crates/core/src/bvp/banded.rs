//! Banded LU factorization with partial pivoting (LAPACK `gbtf2` layout).

/// Square matrix with `kl` sub-diagonals and `ku` super-diagonals, stored
/// column-major with `kl` extra rows for pivoting fill-in.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    out_of_band_writes: usize,
}

#[derive(Clone, Debug)]
pub struct BandLu {
    matrix: BandMatrix,
    pivots: Vec<usize>,
}

/// Zero pivot encountered at the given column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SingularPivot(pub usize);

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            ab: vec![0.0; ldab * n],
            out_of_band_writes: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    pub fn in_band(&self, row: usize, col: usize) -> bool {
        row < self.n && col < self.n && row <= col + self.kl && col <= row + self.ku
    }

    #[inline]
    fn index(&self, row: usize, col: usize) -> usize {
        // kv + row - col, with kv = kl + ku
        col * self.ldab + self.kl + self.ku + row - col
    }

    /// Stores `value` at `(row, col)`. Writes outside the declared band are
    /// dropped and counted.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        if self.in_band(row, col) {
            let idx = self.index(row, col);
            self.ab[idx] = value;
        } else if value != 0.0 {
            self.out_of_band_writes += 1;
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        if self.in_band(row, col) {
            let idx = self.index(row, col);
            self.ab[idx] += value;
        } else if value != 0.0 {
            self.out_of_band_writes += 1;
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        if self.in_band(row, col) {
            self.ab[self.index(row, col)]
        } else {
            0.0
        }
    }

    /// Number of non-zero writes that fell outside the band.
    pub fn out_of_band_writes(&self) -> usize {
        self.out_of_band_writes
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for col in 0..self.n {
            let lo = col.saturating_sub(self.ku);
            let hi = (col + self.kl).min(self.n - 1);
            for row in lo..=hi {
                y[row] += self.get(row, col) * x[col];
            }
        }
        y
    }

    pub fn factor(mut self) -> Result<BandLu, SingularPivot> {
        let n = self.n;
        let kl = self.kl;
        let kv = self.kl + self.ku;
        let ldab = self.ldab;
        let mut pivots = vec![0; n];
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let col = j * ldab;
            let mut jp = 0;
            let mut best = self.ab[col + kv].abs();
            for p in 1..=km {
                let v = self.ab[col + kv + p].abs();
                if v > best {
                    best = v;
                    jp = p;
                }
            }
            pivots[j] = j + jp;
            if best == 0.0 || !best.is_finite() {
                return Err(SingularPivot(j));
            }
            ju = ju.max((j + self.ku + jp).min(n - 1));
            if jp != 0 {
                for jj in j..=ju {
                    let base = jj * ldab + kv;
                    self.ab.swap(base + j + jp - jj, base + j - jj);
                }
            }
            if km > 0 {
                let pivot = self.ab[col + kv];
                for p in 1..=km {
                    self.ab[col + kv + p] /= pivot;
                }
                for jj in j + 1..=ju {
                    let base = jj * ldab + kv;
                    let a = self.ab[base + j - jj];
                    if a != 0.0 {
                        for p in 1..=km {
                            let l = self.ab[col + kv + p];
                            self.ab[base + j + p - jj] -= l * a;
                        }
                    }
                }
            }
        }
        Ok(BandLu {
            matrix: self,
            pivots,
        })
    }
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let m = &self.matrix;
        let n = m.n;
        let kv = m.kl + m.ku;
        let ldab = m.ldab;
        for j in 0..n {
            let p = self.pivots[j];
            if p != j {
                b.swap(j, p);
            }
            let km = m.kl.min(n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                for q in 1..=km {
                    b[j + q] -= m.ab[j * ldab + kv + q] * bj;
                }
            }
        }
        for j in (0..n).rev() {
            b[j] /= m.ab[j * ldab + kv];
            let bj = b[j];
            if bj != 0.0 {
                let lo = j.saturating_sub(kv);
                for i in lo..j {
                    b[i] -= m.ab[j * ldab + kv + i - j] * bj;
                }
            }
        }
    }

    pub fn out_of_band_writes(&self) -> usize {
        self.matrix.out_of_band_writes
    }
}
