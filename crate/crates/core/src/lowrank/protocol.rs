use std::marker::PhantomData;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{validate, CompressRun, LowRankConfig, LowRankError, LowRankFactors, PartitionedMatrix};
use crate::commsim::{run_protocol_with, FabricError, Payload, Protocol, ServerCtx, ServerId, Step};
use crate::linalg::{self, DenseMatrix};
use crate::sketch::SketchSeed;

#[derive(Clone)]
enum Down {
    Sketch(SketchSeed),
    Basis { u: DenseMatrix, embed: SketchSeed },
    TopVectors(DenseMatrix),
    Sketched { sa: DenseMatrix, embed: SketchSeed },
    Combined(DenseMatrix),
}

impl Payload for Down {
    fn words(&self) -> usize {
        match self {
            Down::Sketch(seed) => seed.words(),
            Down::Basis { u, embed } => u.len() + embed.words(),
            Down::TopVectors(v) => v.len(),
            Down::Sketched { sa, embed } => sa.len() + embed.words(),
            Down::Combined(m) => m.len(),
        }
    }
}

enum Up {
    Matrix(DenseMatrix),
    Ack,
}

impl Payload for Up {
    fn words(&self) -> usize {
        match self {
            Up::Matrix(m) => m.len(),
            Up::Ack => 0,
        }
    }
}

struct ServerData<'a> {
    block: &'a DenseMatrix,
    k: usize,
}

#[derive(Default)]
struct ServerState {
    u: Option<DenseMatrix>,
    sa: Option<DenseMatrix>,
    projected: Option<DenseMatrix>,
    v: Option<DenseMatrix>,
}

struct Output {
    u: DenseMatrix,
    v: DenseMatrix,
}

struct Coordinator<'a> {
    servers: usize,
    n: usize,
    d: usize,
    k: usize,
    sketch_rows: usize,
    embedding_rows: usize,
    sketch_t: usize,
    embed_t: usize,
    bit_bounded: bool,
    u: Option<DenseMatrix>,
    v: Option<DenseMatrix>,
    _data: PhantomData<&'a DenseMatrix>,
}

fn sum_replies(replies: Vec<(ServerId, Up)>) -> Result<DenseMatrix, FabricError> {
    let mats: Vec<DenseMatrix> = replies
        .into_iter()
        .map(|(id, up)| match up {
            Up::Matrix(m) => Ok(m),
            Up::Ack => Err(FabricError::step_failed(id, "expected a matrix reply")),
        })
        .collect::<Result<_, _>>()?;
    DenseMatrix::sum(mats.iter()).map_err(|e| FabricError::step_failed(0, e))
}

fn cp_err(e: impl ToString) -> FabricError {
    FabricError::step_failed(0, e)
}

/// `U` with orthonormal columns spanning the row space of `SA`.
fn basis(sa: &DenseMatrix) -> Result<DenseMatrix, linalg::LinalgError> {
    Ok(linalg::orthonormal_row_basis(sa)?.transpose())
}

/// `PAU` recovered from `PA(SA)ᵀ`: with `R = SA·U`, `(SA)ᵀ = U·Rᵀ`, so
/// `PAU = PA(SA)ᵀ·R·(RᵀR)⁻¹`.
fn recover_pau(pasa: &DenseMatrix, sa: &DenseMatrix, u: &DenseMatrix) -> Result<DenseMatrix, String> {
    let r = sa.matmul(u).map_err(|e| e.to_string())?;
    let gram = r.t_matmul(&r).map_err(|e| e.to_string())?;
    let inv = gram
        .to_nalgebra()
        .cholesky()
        .ok_or("RᵀR is not positive definite")?
        .inverse();
    let right = r.matmul(&DenseMatrix::from_nalgebra(&inv)).map_err(|e| e.to_string())?;
    pasa.matmul(&right).map_err(|e| e.to_string())
}

fn top_vectors(pau: &DenseMatrix, k: usize) -> Result<DenseMatrix, linalg::LinalgError> {
    linalg::top_right_singular_vectors(pau, k.min(pau.cols()).min(pau.rows()))
}

impl Coordinator<'_> {
    fn zero_output(&self) -> Output {
        Output {
            u: DenseMatrix::zeros(self.d, 0),
            v: DenseMatrix::zeros(0, 0),
        }
    }
}

impl<'a> Protocol for Coordinator<'a> {
    type Input = ServerData<'a>;
    type Local = ServerState;
    type Down = Down;
    type Up = Up;
    type Output = Output;

    fn round_bound(&self) -> usize {
        3
    }

    fn coordinate(
        &mut self,
        done: usize,
        replies: Vec<(ServerId, Up)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Step<Down, Output>, FabricError> {
        match done {
            0 => {
                let seed = SketchSeed::generate(self.sketch_rows, self.n, self.sketch_t, rng.random()).map_err(cp_err)?;
                Ok(Step::broadcast(self.servers, Down::Sketch(seed)))
            }
            1 => {
                let sa = sum_replies(replies)?;
                if sa.is_zero() {
                    return Ok(Step::Halt(self.zero_output()));
                }
                let u = basis(&sa).map_err(cp_err)?;
                let embed =
                    SketchSeed::generate(self.embedding_rows, self.n, self.embed_t, rng.random()).map_err(cp_err)?;
                let msg = if self.bit_bounded {
                    Down::Sketched { sa, embed }
                } else {
                    Down::Basis { u: u.clone(), embed }
                };
                self.u = Some(u);
                Ok(Step::broadcast(self.servers, msg))
            }
            2 => {
                let combined = sum_replies(replies)?;
                let u = self.u.as_ref().expect("basis fixed in round 2");
                if self.bit_bounded {
                    // Each server derives V itself from PA(SA)ᵀ.
                    Ok(Step::broadcast(self.servers, Down::Combined(combined)))
                } else {
                    let v = top_vectors(&combined, self.k).map_err(cp_err)?;
                    debug_assert_eq!(v.rows(), u.cols());
                    self.v = Some(v.clone());
                    Ok(Step::broadcast(self.servers, Down::TopVectors(v)))
                }
            }
            _ => Ok(Step::Halt(Output {
                u: self.u.take().unwrap_or_else(|| DenseMatrix::zeros(self.d, 0)),
                v: self.v.take().unwrap_or_else(|| DenseMatrix::zeros(0, 0)),
            })),
        }
    }

    fn serve(ctx: &mut ServerCtx<'_, ServerData<'a>, ServerState>, msg: &Down) -> Result<Up, FabricError> {
        let id = ctx.id();
        let data = ctx.input();
        let at = data.block;
        let fail = |e: &dyn std::fmt::Display| FabricError::step_failed(id, e.to_string());
        match msg {
            Down::Sketch(seed) => Ok(Up::Matrix(seed.apply_left(at).map_err(|e| fail(&e))?)),
            Down::Basis { u, embed } => {
                let projected = at.matmul(u).map_err(|e| fail(&e))?;
                let reply = embed.apply_left(&projected).map_err(|e| fail(&e))?;
                let state = ctx.local();
                state.u = Some(u.clone());
                state.projected = Some(projected);
                Ok(Up::Matrix(reply))
            }
            Down::TopVectors(v) => {
                ctx.local().v = Some(v.clone());
                Ok(Up::Ack)
            }
            Down::Sketched { sa, embed } => {
                let u = basis(sa).map_err(|e| fail(&e))?;
                let projected = at.matmul(&u).map_err(|e| fail(&e))?;
                let a_sat = at.matmul(&sa.transpose()).map_err(|e| fail(&e))?;
                let reply = embed.apply_left(&a_sat).map_err(|e| fail(&e))?;
                let state = ctx.local();
                state.u = Some(u);
                state.sa = Some(sa.clone());
                state.projected = Some(projected);
                Ok(Up::Matrix(reply))
            }
            Down::Combined(pasa) => {
                let k = data.k;
                let state = ctx.local();
                let (sa, u) = match (&state.sa, &state.u) {
                    (Some(sa), Some(u)) => (sa, u),
                    _ => return Err(FabricError::step_failed(id, "combined sketch before SA")),
                };
                let pau = recover_pau(pasa, sa, u).map_err(|e| fail(&e))?;
                let v = top_vectors(&pau, k).map_err(|e| fail(&e))?;
                state.v = Some(v);
                Ok(Up::Ack)
            }
        }
    }
}

/// Runs AdaptiveCompress on `input` with target rank `k` and accuracy `eps`.
///
/// Server `t` ends holding `AᵗU`, `U` and `V`; the returned factors collect
/// those pieces. An all-zero sketch `SA` ends the run after one round with
/// empty factors.
pub fn adaptive_compress(
    input: &PartitionedMatrix,
    k: usize,
    eps: f64,
    master_seed: u64,
    config: &LowRankConfig,
) -> Result<CompressRun, LowRankError> {
    validate(input, k, eps)?;
    let sketch_rows = config.sketch_rows(k, eps);
    let sketch_t = config.sketch_independence(k);
    let embedding_rows = config.embedding_rows(sketch_rows, eps);
    let embed_t = config.embedding_independence(k);
    SketchSeed::check_shape(sketch_rows, input.n(), sketch_t)?;
    SketchSeed::check_shape(embedding_rows, input.n(), embed_t)?;

    let cp = Coordinator {
        servers: input.servers(),
        n: input.n(),
        d: input.d(),
        k,
        sketch_rows,
        embedding_rows,
        sketch_t,
        embed_t,
        bit_bounded: config.bit_bounded,
        u: None,
        v: None,
        _data: PhantomData,
    };
    let inputs = input.blocks().iter().map(|block| ServerData { block, k }).collect();
    let outcome = run_protocol_with(cp, inputs, master_seed, config.schedule)?;

    let r = outcome.output.u.cols();
    let mut v = outcome.output.v;
    if config.bit_bounded && r > 0 {
        v = outcome.locals[0].v.clone().ok_or_else(|| {
            LowRankError::FactorMismatch("server 1 finished without V".into())
        })?;
    }
    let projected = outcome
        .locals
        .into_iter()
        .map(|s| s.projected.unwrap_or_else(|| DenseMatrix::zeros(input.n(), r)))
        .collect();
    let factors = LowRankFactors {
        u: outcome.output.u,
        v: if r == 0 { DenseMatrix::zeros(0, 0) } else { v },
        projected,
    };
    Ok(CompressRun {
        factors,
        ledger: outcome.ledger,
        sketch_rows,
        embedding_rows,
    })
}
