//! C ABI over the action laboratory: opaque handles for sampled potentials,
//! kinetic costs, and solved action stacks, plus flat entry points for the
//! shape estimator. Every call returns a status code; failures leave a
//! message readable through `actionlab_last_error_message` on the same
//! thread. Handles are freed exactly once by their matching `_free` call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use actionlab::asymptotics::{estimate_shape, Replication};
use actionlab::environment::{
    sample_environment, EnvError, EnvironmentSpec, PoissonCloud, Potential, Window,
};
use actionlab::kinetics::{KineticEnergy, KineticsError};
use actionlab::solver::{solve, ActionStack, Frame, GridSpec, SolverError};

/// Status code returned by every fallible entry point. Zero is success;
/// anything else stores a thread-local message.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidJson = 3,
    Environment = 4,
    Kinetics = 5,
    Solver = 6,
    Panicked = 7,
}

/// Opaque potential handle: a sampled Poisson cloud or a constant field.
pub struct ActionlabCloud {
    inner: Potential,
}

/// Opaque kinetic cost handle.
pub struct ActionlabKinetics {
    inner: KineticEnergy,
}

/// Opaque handle over a solved dynamic-programming table.
pub struct ActionlabStack {
    inner: ActionStack,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) -> ActionlabStatus {
    // Interior NUL bytes cannot appear in a C string; replace, never fail.
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(text).expect("nul bytes replaced"));
    });
    ActionlabStatus::Ok
}

fn fail(status: ActionlabStatus, msg: impl Into<String>) -> ActionlabStatus {
    set_error(msg);
    status
}

fn null_arg(name: &str) -> ActionlabStatus {
    fail(ActionlabStatus::NullPointer, format!("{name} must not be null"))
}

fn env_failure(e: EnvError) -> ActionlabStatus {
    fail(ActionlabStatus::Environment, e.to_string())
}

fn kinetics_failure(e: KineticsError) -> ActionlabStatus {
    fail(ActionlabStatus::Kinetics, e.to_string())
}

fn solver_failure(e: SolverError) -> ActionlabStatus {
    fail(ActionlabStatus::Solver, e.to_string())
}

/// Unwinding across the ABI is never allowed; a caught panic turns into a
/// status code like any other failure.
fn guarded(f: impl FnOnce() -> ActionlabStatus) -> ActionlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(ActionlabStatus::Panicked, "internal panic reached the boundary"),
    }
}

unsafe fn parse_json_arg(text: *const c_char) -> Result<&'static str, ActionlabStatus> {
    if text.is_null() {
        return Err(null_arg("json text"));
    }
    CStr::from_ptr(text)
        .to_str()
        .map_err(|e| fail(ActionlabStatus::InvalidJson, format!("text is not UTF-8: {e}")))
}

/// Crate version as a static NUL-terminated string. Never freed.
#[no_mangle]
pub extern "C" fn actionlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Version stamp shared with every serialized artifact of the core library.
#[no_mangle]
pub extern "C" fn actionlab_format_version() -> u32 {
    actionlab::FORMAT_VERSION
}

/// Message for the most recent failure on the calling thread, or null if no
/// call has failed yet. The pointer stays valid until the next failure on
/// the same thread; do not free it.
#[no_mangle]
pub extern "C" fn actionlab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Release a string returned by an `actionlab_*` call with a `*mut char`
/// out-parameter. Null is accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn actionlab_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

/// JSON form of the reference environment in the given dimension: unit
/// intensity, unit radius caps, signed unit amplitudes. Returns null and
/// records a message if the dimension is zero. Free with
/// `actionlab_string_free`.
#[no_mangle]
pub extern "C" fn actionlab_standard_spec_json(dimension: usize) -> *mut c_char {
    if dimension == 0 {
        fail(ActionlabStatus::InvalidArgument, "dimension must be at least 1");
        return std::ptr::null_mut();
    }
    let spec = EnvironmentSpec::standard(dimension);
    let text = serde_json::to_string(&spec).expect("spec serializes");
    CString::new(text).expect("json has no nul bytes").into_raw()
}

/// Sample a Poisson cloud inside the box `[t_lo, t_hi] x prod [x_lo, x_hi]`.
/// `spec_json` is an environment spec as produced by
/// `actionlab_standard_spec_json`; `x_lo` and `x_hi` point at arrays whose
/// length equals the spec dimension. The same seed over the same window
/// reproduces the same cloud.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_sample(
    spec_json: *const c_char,
    t_lo: f64,
    t_hi: f64,
    x_lo: *const f64,
    x_hi: *const f64,
    seed: u64,
    out: *mut *mut ActionlabCloud,
) -> ActionlabStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let text = match parse_json_arg(spec_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let spec: EnvironmentSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(ActionlabStatus::InvalidJson, format!("bad spec: {e}")),
        };
        if x_lo.is_null() || x_hi.is_null() {
            return null_arg("window bounds");
        }
        let d = spec.dimension;
        let lo = std::slice::from_raw_parts(x_lo, d).to_vec();
        let hi = std::slice::from_raw_parts(x_hi, d).to_vec();
        let window = Window::boxed(t_lo, t_hi, lo, hi);
        match sample_environment(&spec, &window, seed) {
            Ok(cloud) => {
                *out = Box::into_raw(Box::new(ActionlabCloud { inner: Potential::Cloud(cloud) }));
                ActionlabStatus::Ok
            }
            Err(e) => env_failure(e),
        }
    })
}

/// Wrap the constant field `F == value`, the deterministic hook used to
/// cross-check solver output against closed forms.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_uniform(
    dimension: usize,
    value: f64,
    out: *mut *mut ActionlabCloud,
) -> ActionlabStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if dimension == 0 {
            return fail(ActionlabStatus::InvalidArgument, "dimension must be at least 1");
        }
        if !value.is_finite() {
            return fail(ActionlabStatus::InvalidArgument, "field value must be finite");
        }
        let inner = Potential::Uniform { dimension, value };
        *out = Box::into_raw(Box::new(ActionlabCloud { inner }));
        ActionlabStatus::Ok
    })
}

/// Rebuild a cloud from the JSON produced by `actionlab_cloud_to_json`.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_from_json(
    json: *const c_char,
    out: *mut *mut ActionlabCloud,
) -> ActionlabStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let text = match parse_json_arg(json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        match PoissonCloud::from_json(text) {
            Ok(cloud) => {
                *out = Box::into_raw(Box::new(ActionlabCloud { inner: Potential::Cloud(cloud) }));
                ActionlabStatus::Ok
            }
            Err(e) => env_failure(e),
        }
    })
}

/// Serialize a sampled cloud, spec and seed and window included. Constant
/// fields have no serialized form and report `InvalidArgument`. Free the
/// string with `actionlab_string_free`.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_to_json(
    cloud: *const ActionlabCloud,
    out: *mut *mut c_char,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        if out.is_null() {
            return null_arg("out");
        }
        match &cloud.inner {
            Potential::Cloud(c) => {
                let text = c.to_json();
                *out = CString::new(text).expect("json has no nul bytes").into_raw();
                ActionlabStatus::Ok
            }
            Potential::Uniform { .. } => fail(
                ActionlabStatus::InvalidArgument,
                "constant fields have no serialized form",
            ),
        }
    })
}

/// Image of the potential under the shear `(t, x) -> (t, x + t v)`; `v`
/// points at an array of the cloud dimension. A constant field shears to
/// itself.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_shear(
    cloud: *const ActionlabCloud,
    v: *const f64,
    out: *mut *mut ActionlabCloud,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        if v.is_null() || out.is_null() {
            return null_arg("v and out");
        }
        let vs = std::slice::from_raw_parts(v, cloud.inner.dimension());
        let sheared = match &cloud.inner {
            Potential::Cloud(c) => match c.shear(vs) {
                Ok(s) => Potential::Cloud(s),
                Err(e) => return env_failure(e),
            },
            Potential::Uniform { dimension, value } => {
                Potential::Uniform { dimension: *dimension, value: *value }
            }
        };
        *out = Box::into_raw(Box::new(ActionlabCloud { inner: sheared }));
        ActionlabStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_free(cloud: *mut ActionlabCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_dimension(
    cloud: *const ActionlabCloud,
    out: *mut usize,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        if out.is_null() {
            return null_arg("out");
        }
        *out = cloud.inner.dimension();
        ActionlabStatus::Ok
    })
}

/// Number of sampled bumps; zero for a constant field.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_point_count(
    cloud: *const ActionlabCloud,
    out: *mut usize,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        if out.is_null() {
            return null_arg("out");
        }
        *out = match &cloud.inner {
            Potential::Cloud(c) => c.points().len(),
            Potential::Uniform { .. } => 0,
        };
        ActionlabStatus::Ok
    })
}

/// Content digest of the potential, stable across processes. Free the
/// string with `actionlab_string_free`.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_content_hash(
    cloud: *const ActionlabCloud,
    out: *mut *mut c_char,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        if out.is_null() {
            return null_arg("out");
        }
        let text = cloud.inner.content_hash();
        *out = CString::new(text).expect("hash is hex").into_raw();
        ActionlabStatus::Ok
    })
}

/// Evaluate the potential at `(t, x)`; `x` has the cloud dimension.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_eval_f(
    cloud: *const ActionlabCloud,
    t: f64,
    x: *const f64,
    out: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        if x.is_null() || out.is_null() {
            return null_arg("x and out");
        }
        let xs = std::slice::from_raw_parts(x, cloud.inner.dimension());
        match cloud.inner.eval_f(t, xs) {
            Ok(value) => {
                *out = value;
                ActionlabStatus::Ok
            }
            Err(e) => env_failure(e),
        }
    })
}

/// Evaluate the potential seen from the frame moving at `v`: each bump is
/// read at `x + (t - t_i) v - x_i`. `v` and `x` both have the cloud
/// dimension.
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_eval_f_sheared(
    cloud: *const ActionlabCloud,
    v: *const f64,
    t: f64,
    x: *const f64,
    out: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        if v.is_null() || x.is_null() || out.is_null() {
            return null_arg("v, x and out");
        }
        let d = cloud.inner.dimension();
        let vs = std::slice::from_raw_parts(v, d);
        let xs = std::slice::from_raw_parts(x, d);
        match cloud.inner.eval_f_sheared(vs, t, xs) {
            Ok(value) => {
                *out = value;
                ActionlabStatus::Ok
            }
            Err(e) => env_failure(e),
        }
    })
}

/// Velocity derivative of the sheared potential at rest, written into
/// `out_vec` (length = cloud dimension).
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_eval_theta(
    cloud: *const ActionlabCloud,
    t: f64,
    x: *const f64,
    out_vec: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        let d = cloud.inner.dimension();
        let rest = vec![0.0; d];
        eval_theta_into(cloud, &rest, t, x, out_vec)
    })
}

/// Velocity derivative of the sheared potential at velocity `v`, written
/// into `out_vec` (length = cloud dimension).
#[no_mangle]
pub unsafe extern "C" fn actionlab_cloud_eval_theta_sheared(
    cloud: *const ActionlabCloud,
    v: *const f64,
    t: f64,
    x: *const f64,
    out_vec: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        if v.is_null() {
            return null_arg("v");
        }
        let vs = std::slice::from_raw_parts(v, cloud.inner.dimension()).to_vec();
        eval_theta_into(cloud, &vs, t, x, out_vec)
    })
}

unsafe fn eval_theta_into(
    cloud: &ActionlabCloud,
    v: &[f64],
    t: f64,
    x: *const f64,
    out_vec: *mut f64,
) -> ActionlabStatus {
    if x.is_null() || out_vec.is_null() {
        return null_arg("x and out_vec");
    }
    let d = cloud.inner.dimension();
    let xs = std::slice::from_raw_parts(x, d);
    match cloud.inner.eval_theta_sheared(v, t, xs) {
        Ok(theta) => {
            std::slice::from_raw_parts_mut(out_vec, d).copy_from_slice(&theta);
            ActionlabStatus::Ok
        }
        Err(e) => env_failure(e),
    }
}

/// Quadratic kinetic cost `scale * |v|^2 / 2`.
#[no_mangle]
pub unsafe extern "C" fn actionlab_kinetics_quadratic(
    scale: f64,
    out: *mut *mut ActionlabKinetics,
) -> ActionlabStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        let kin = KineticEnergy::quadratic(scale);
        if let Err(e) = kin.validate() {
            return kinetics_failure(e);
        }
        *out = Box::into_raw(Box::new(ActionlabKinetics { inner: kin }));
        ActionlabStatus::Ok
    })
}

/// Radial polynomial cost `sum_k coeffs[k] * |v|^k`. The linear coefficient
/// must vanish and the top coefficient must be positive; validation failures
/// come back as `Kinetics` status.
#[no_mangle]
pub unsafe extern "C" fn actionlab_kinetics_polynomial(
    coeffs: *const f64,
    count: usize,
    out: *mut *mut ActionlabKinetics,
) -> ActionlabStatus {
    guarded(|| {
        if out.is_null() {
            return null_arg("out");
        }
        if coeffs.is_null() {
            return null_arg("coeffs");
        }
        let cs = std::slice::from_raw_parts(coeffs, count).to_vec();
        let kin = KineticEnergy::polynomial(cs);
        if let Err(e) = kin.validate() {
            return kinetics_failure(e);
        }
        *out = Box::into_raw(Box::new(ActionlabKinetics { inner: kin }));
        ActionlabStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn actionlab_kinetics_free(kinetics: *mut ActionlabKinetics) {
    if !kinetics.is_null() {
        drop(Box::from_raw(kinetics));
    }
}

#[no_mangle]
pub unsafe extern "C" fn actionlab_kinetics_eval(
    kinetics: *const ActionlabKinetics,
    v: *const f64,
    dimension: usize,
    out: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(kin) = kinetics.as_ref() else { return null_arg("kinetics") };
        if v.is_null() || out.is_null() {
            return null_arg("v and out");
        }
        if dimension == 0 {
            return fail(ActionlabStatus::InvalidArgument, "dimension must be at least 1");
        }
        let vs = std::slice::from_raw_parts(v, dimension);
        *out = kin.inner.eval(vs);
        ActionlabStatus::Ok
    })
}

/// Gradient of the kinetic cost, written into `out_vec` (length =
/// `dimension`).
#[no_mangle]
pub unsafe extern "C" fn actionlab_kinetics_grad(
    kinetics: *const ActionlabKinetics,
    v: *const f64,
    dimension: usize,
    out_vec: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(kin) = kinetics.as_ref() else { return null_arg("kinetics") };
        if v.is_null() || out_vec.is_null() {
            return null_arg("v and out_vec");
        }
        if dimension == 0 {
            return fail(ActionlabStatus::InvalidArgument, "dimension must be at least 1");
        }
        let vs = std::slice::from_raw_parts(v, dimension);
        let grad = kin.inner.grad(vs);
        std::slice::from_raw_parts_mut(out_vec, dimension).copy_from_slice(&grad);
        ActionlabStatus::Ok
    })
}

/// Convex conjugate `sup_v (p . v - L(v))` at momentum `p`.
#[no_mangle]
pub unsafe extern "C" fn actionlab_kinetics_legendre(
    kinetics: *const ActionlabKinetics,
    p: *const f64,
    dimension: usize,
    out: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(kin) = kinetics.as_ref() else { return null_arg("kinetics") };
        if p.is_null() || out.is_null() {
            return null_arg("p and out");
        }
        if dimension == 0 {
            return fail(ActionlabStatus::InvalidArgument, "dimension must be at least 1");
        }
        let ps = std::slice::from_raw_parts(p, dimension);
        match kin.inner.legendre(ps) {
            Ok(value) => {
                *out = value;
                ActionlabStatus::Ok
            }
            Err(e) => kinetics_failure(e),
        }
    })
}

/// Solve the directed problem from the origin over `steps` slices of length
/// `dt`, spatial pitch `dx`, per-step node window `velocity_window`, and
/// spatial extent `half_extent_nodes` per side (pass 0 for the full
/// reachable cone). `velocity` is null for the rest frame or points at an
/// array of the cloud dimension; `alpha` scales the potential and `beta`
/// the kinetic cost. The stack owns a copy of nothing; cloud and kinetics
/// stay caller-owned and may be freed after this returns.
#[no_mangle]
pub unsafe extern "C" fn actionlab_solve(
    cloud: *const ActionlabCloud,
    kinetics: *const ActionlabKinetics,
    dt: f64,
    dx: f64,
    steps: usize,
    velocity_window: usize,
    half_extent_nodes: usize,
    velocity: *const f64,
    alpha: f64,
    beta: f64,
    out: *mut *mut ActionlabStack,
) -> ActionlabStatus {
    guarded(|| {
        let Some(cloud) = cloud.as_ref() else { return null_arg("cloud") };
        let Some(kin) = kinetics.as_ref() else { return null_arg("kinetics") };
        if out.is_null() {
            return null_arg("out");
        }
        let dimension = cloud.inner.dimension();
        let grid = GridSpec {
            dimension,
            dt,
            dx,
            steps,
            velocity_window,
            half_extent_nodes: if half_extent_nodes == 0 {
                steps * velocity_window
            } else {
                half_extent_nodes
            },
        };
        let v = if velocity.is_null() {
            vec![0.0; dimension]
        } else {
            std::slice::from_raw_parts(velocity, dimension).to_vec()
        };
        let frame = Frame { v, alpha, beta };
        match solve(&cloud.inner, &kin.inner, &grid, &frame) {
            Ok(stack) => {
                *out = Box::into_raw(Box::new(ActionlabStack { inner: stack }));
                ActionlabStatus::Ok
            }
            Err(e) => solver_failure(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn actionlab_stack_free(stack: *mut ActionlabStack) {
    if !stack.is_null() {
        drop(Box::from_raw(stack));
    }
}

#[no_mangle]
pub unsafe extern "C" fn actionlab_stack_steps(
    stack: *const ActionlabStack,
    out: *mut usize,
) -> ActionlabStatus {
    guarded(|| {
        let Some(stack) = stack.as_ref() else { return null_arg("stack") };
        if out.is_null() {
            return null_arg("out");
        }
        *out = stack.inner.grid().steps;
        ActionlabStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn actionlab_stack_dimension(
    stack: *const ActionlabStack,
    out: *mut usize,
) -> ActionlabStatus {
    guarded(|| {
        let Some(stack) = stack.as_ref() else { return null_arg("stack") };
        if out.is_null() {
            return null_arg("out");
        }
        *out = stack.inner.grid().dimension;
        ActionlabStatus::Ok
    })
}

/// Accumulated action at a lattice cell. `node` points at an array of the
/// grid dimension; unreachable cells report a `Solver` failure.
#[no_mangle]
pub unsafe extern "C" fn actionlab_stack_value_at(
    stack: *const ActionlabStack,
    slice: usize,
    node: *const i64,
    out: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(stack) = stack.as_ref() else { return null_arg("stack") };
        if node.is_null() || out.is_null() {
            return null_arg("node and out");
        }
        let ns = std::slice::from_raw_parts(node, stack.inner.grid().dimension);
        match stack.inner.value_at(slice, ns) {
            Ok(value) => {
                *out = value;
                ActionlabStatus::Ok
            }
            Err(e) => solver_failure(e),
        }
    })
}

/// Point-to-point action from the origin to the lattice node nearest `x`
/// at the final slice.
#[no_mangle]
pub unsafe extern "C" fn actionlab_stack_point_to_point_action(
    stack: *const ActionlabStack,
    x: *const f64,
    out: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(stack) = stack.as_ref() else { return null_arg("stack") };
        if x.is_null() || out.is_null() {
            return null_arg("x and out");
        }
        let xs = std::slice::from_raw_parts(x, stack.inner.grid().dimension);
        match stack.inner.point_to_point_action(xs) {
            Ok(value) => {
                *out = value;
                ActionlabStatus::Ok
            }
            Err(e) => solver_failure(e),
        }
    })
}

/// Minimizing lattice path to the node nearest `x`, flattened slice-major
/// into `out_nodes` as `(steps + 1) * dimension` coordinates. `out_len`
/// always receives the required length; the copy happens only when
/// `capacity` suffices, so a null `out_nodes` with zero capacity queries
/// the size.
#[no_mangle]
pub unsafe extern "C" fn actionlab_stack_minimizer(
    stack: *const ActionlabStack,
    x: *const f64,
    out_nodes: *mut i64,
    capacity: usize,
    out_len: *mut usize,
) -> ActionlabStatus {
    guarded(|| {
        let Some(stack) = stack.as_ref() else { return null_arg("stack") };
        if x.is_null() || out_len.is_null() {
            return null_arg("x and out_len");
        }
        let grid = stack.inner.grid();
        let xs = std::slice::from_raw_parts(x, grid.dimension);
        let path = match stack.inner.extract_minimizer(xs) {
            Ok(p) => p,
            Err(e) => return solver_failure(e),
        };
        let needed = path.nodes.len() * grid.dimension;
        *out_len = needed;
        if out_nodes.is_null() || capacity == 0 {
            return ActionlabStatus::Ok;
        }
        if capacity < needed {
            return fail(
                ActionlabStatus::InvalidArgument,
                format!("buffer holds {capacity} coordinates, path needs {needed}"),
            );
        }
        let dst = std::slice::from_raw_parts_mut(out_nodes, needed);
        for (i, node) in path.nodes.iter().enumerate() {
            dst[i * grid.dimension..(i + 1) * grid.dimension].copy_from_slice(node);
        }
        ActionlabStatus::Ok
    })
}

/// Monte Carlo estimate of the normalized loop action for one frame:
/// `replicates` independent environments derived from `base_seed`, solved
/// on the given grid, averaged per unit time. `velocity` follows the same
/// convention as `actionlab_solve`. Writes the mean and its standard error.
#[no_mangle]
pub unsafe extern "C" fn actionlab_shape_estimate(
    spec_json: *const c_char,
    kinetics: *const ActionlabKinetics,
    dt: f64,
    dx: f64,
    steps: usize,
    velocity_window: usize,
    half_extent_nodes: usize,
    velocity: *const f64,
    alpha: f64,
    beta: f64,
    replicates: usize,
    base_seed: u64,
    out_mean: *mut f64,
    out_std_error: *mut f64,
) -> ActionlabStatus {
    guarded(|| {
        let Some(kin) = kinetics.as_ref() else { return null_arg("kinetics") };
        if out_mean.is_null() || out_std_error.is_null() {
            return null_arg("out_mean and out_std_error");
        }
        let text = match parse_json_arg(spec_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let spec: EnvironmentSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(ActionlabStatus::InvalidJson, format!("bad spec: {e}")),
        };
        let dimension = spec.dimension;
        let grid = GridSpec {
            dimension,
            dt,
            dx,
            steps,
            velocity_window,
            half_extent_nodes: if half_extent_nodes == 0 {
                steps * velocity_window
            } else {
                half_extent_nodes
            },
        };
        let v = if velocity.is_null() {
            vec![0.0; dimension]
        } else {
            std::slice::from_raw_parts(velocity, dimension).to_vec()
        };
        let frame = Frame { v, alpha, beta };
        let repl = Replication { replicates, base_seed };
        match estimate_shape(&spec, &kin.inner, &grid, &frame, &repl) {
            Ok(est) => {
                *out_mean = est.mean;
                *out_std_error = est.std_error;
                ActionlabStatus::Ok
            }
            Err(e) => solver_failure(e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    unsafe fn sample_standard(seed: u64) -> *mut ActionlabCloud {
        let spec = actionlab_standard_spec_json(1);
        assert!(!spec.is_null());
        let mut cloud = ptr::null_mut();
        let status = actionlab_cloud_sample(
            spec,
            0.0,
            5.0,
            [-8.0].as_ptr(),
            [8.0].as_ptr(),
            seed,
            &mut cloud,
        );
        actionlab_string_free(spec);
        assert_eq!(status, ActionlabStatus::Ok);
        cloud
    }

    #[test]
    fn version_strings_are_static_and_nonempty() {
        let p = actionlab_version();
        assert!(!p.is_null());
        let text = unsafe { CStr::from_ptr(p) }.to_str().unwrap();
        assert!(!text.is_empty());
        assert_eq!(actionlab_format_version(), actionlab::FORMAT_VERSION);
    }

    #[test]
    fn null_handles_set_a_readable_message() {
        unsafe {
            let mut out = 0usize;
            let status = actionlab_cloud_dimension(ptr::null(), &mut out);
            assert_eq!(status, ActionlabStatus::NullPointer);
            let msg = actionlab_last_error_message();
            assert!(!msg.is_null());
            let text = CStr::from_ptr(msg).to_str().unwrap();
            assert!(text.contains("cloud"));
        }
    }

    #[test]
    fn bad_spec_json_is_rejected_not_fatal() {
        unsafe {
            let mut cloud = ptr::null_mut();
            let text = CString::new("{\"nope\": 1}").unwrap();
            let status = actionlab_cloud_sample(
                text.as_ptr(),
                0.0,
                1.0,
                [-1.0].as_ptr(),
                [1.0].as_ptr(),
                7,
                &mut cloud,
            );
            assert_eq!(status, ActionlabStatus::InvalidJson);
            assert!(cloud.is_null());
        }
    }

    #[test]
    fn sampled_cloud_round_trips_through_json() {
        unsafe {
            let cloud = sample_standard(99);
            let mut count = 0usize;
            assert_eq!(actionlab_cloud_point_count(cloud, &mut count), ActionlabStatus::Ok);
            assert!(count > 0);

            let mut json = ptr::null_mut();
            assert_eq!(actionlab_cloud_to_json(cloud, &mut json), ActionlabStatus::Ok);
            let mut copy = ptr::null_mut();
            assert_eq!(actionlab_cloud_from_json(json, &mut copy), ActionlabStatus::Ok);
            actionlab_string_free(json);

            let mut h0 = ptr::null_mut();
            let mut h1 = ptr::null_mut();
            assert_eq!(actionlab_cloud_content_hash(cloud, &mut h0), ActionlabStatus::Ok);
            assert_eq!(actionlab_cloud_content_hash(copy, &mut h1), ActionlabStatus::Ok);
            assert_eq!(CStr::from_ptr(h0), CStr::from_ptr(h1));
            actionlab_string_free(h0);
            actionlab_string_free(h1);

            actionlab_cloud_free(cloud);
            actionlab_cloud_free(copy);
        }
    }

    #[test]
    fn field_and_theta_agree_with_the_shear_identity() {
        unsafe {
            let cloud = sample_standard(4242);
            let v = [0.3];
            let (t, x) = (2.0, [0.4]);

            // The moving-frame read equals the plain read of the sheared
            // cloud at the transported point.
            let mut sheared = 0.0;
            let mut plain = 0.0;
            assert_eq!(
                actionlab_cloud_eval_f_sheared(cloud, v.as_ptr(), t, x.as_ptr(), &mut sheared),
                ActionlabStatus::Ok
            );
            let mut image = ptr::null_mut();
            assert_eq!(actionlab_cloud_shear(cloud, v.as_ptr(), &mut image), ActionlabStatus::Ok);
            let shifted = [x[0] + t * v[0]];
            assert_eq!(
                actionlab_cloud_eval_f(image, t, shifted.as_ptr(), &mut plain),
                ActionlabStatus::Ok
            );
            assert!((sheared - plain).abs() < 1e-12);
            actionlab_cloud_free(image);

            // Central differences of F_v in v reproduce theta.
            let mut theta = [0.0];
            assert_eq!(
                actionlab_cloud_eval_theta_sheared(cloud, v.as_ptr(), t, x.as_ptr(), theta.as_mut_ptr()),
                ActionlabStatus::Ok
            );
            let h = 1e-5;
            let (mut up, mut dn) = (0.0, 0.0);
            actionlab_cloud_eval_f_sheared(cloud, [v[0] + h].as_ptr(), t, x.as_ptr(), &mut up);
            actionlab_cloud_eval_f_sheared(cloud, [v[0] - h].as_ptr(), t, x.as_ptr(), &mut dn);
            assert!((theta[0] - (up - dn) / (2.0 * h)).abs() < 1e-6);

            actionlab_cloud_free(cloud);
        }
    }

    #[test]
    fn quadratic_kinetics_expose_eval_grad_and_conjugate() {
        unsafe {
            let mut kin = ptr::null_mut();
            assert_eq!(actionlab_kinetics_quadratic(1.0, &mut kin), ActionlabStatus::Ok);
            let v = [3.0, 4.0];
            let mut value = 0.0;
            assert_eq!(actionlab_kinetics_eval(kin, v.as_ptr(), 2, &mut value), ActionlabStatus::Ok);
            assert!((value - 12.5).abs() < 1e-12);
            let mut grad = [0.0, 0.0];
            assert_eq!(
                actionlab_kinetics_grad(kin, v.as_ptr(), 2, grad.as_mut_ptr()),
                ActionlabStatus::Ok
            );
            assert!((grad[0] - 3.0).abs() < 1e-12 && (grad[1] - 4.0).abs() < 1e-12);
            // The conjugate of |v|^2/2 is |p|^2/2.
            let mut star = 0.0;
            assert_eq!(actionlab_kinetics_legendre(kin, v.as_ptr(), 2, &mut star), ActionlabStatus::Ok);
            assert!((star - 12.5).abs() < 1e-9);
            actionlab_kinetics_free(kin);
        }
    }

    #[test]
    fn linear_polynomial_term_is_rejected() {
        unsafe {
            let mut kin = ptr::null_mut();
            let coeffs = [0.0, 1.0, 0.5];
            let status = actionlab_kinetics_polynomial(coeffs.as_ptr(), 3, &mut kin);
            assert_eq!(status, ActionlabStatus::Kinetics);
            assert!(kin.is_null());
        }
    }

    #[test]
    fn zero_field_solve_recovers_the_exact_ballistic_cost() {
        unsafe {
            let mut cloud = ptr::null_mut();
            assert_eq!(actionlab_cloud_uniform(1, 0.0, &mut cloud), ActionlabStatus::Ok);
            let mut kin = ptr::null_mut();
            assert_eq!(actionlab_kinetics_quadratic(1.0, &mut kin), ActionlabStatus::Ok);

            let mut stack = ptr::null_mut();
            let status = actionlab_solve(
                cloud, kin, 0.1, 0.05, 10, 3, 0, ptr::null(), 1.0, 1.0, &mut stack,
            );
            assert_eq!(status, ActionlabStatus::Ok);

            // Straight motion to x = 0.5 in unit time costs exactly v^2/2 = 1/8.
            let mut action = 0.0;
            assert_eq!(
                actionlab_stack_point_to_point_action(stack, [0.5].as_ptr(), &mut action),
                ActionlabStatus::Ok
            );
            assert!((action - 0.125).abs() < 1e-12, "got {action}");

            let mut len = 0usize;
            assert_eq!(
                actionlab_stack_minimizer(stack, [0.5].as_ptr(), ptr::null_mut(), 0, &mut len),
                ActionlabStatus::Ok
            );
            assert_eq!(len, 11);
            let mut nodes = vec![0i64; len];
            assert_eq!(
                actionlab_stack_minimizer(stack, [0.5].as_ptr(), nodes.as_mut_ptr(), len, &mut len),
                ActionlabStatus::Ok
            );
            // One node per slice, straight at one pitch per step.
            assert_eq!(nodes, (0..=10).collect::<Vec<i64>>());

            let mut value = 0.0;
            assert_eq!(
                actionlab_stack_value_at(stack, 10, [10i64].as_ptr(), &mut value),
                ActionlabStatus::Ok
            );
            assert!((value - 0.125).abs() < 1e-12);

            actionlab_stack_free(stack);
            actionlab_kinetics_free(kin);
            actionlab_cloud_free(cloud);
        }
    }

    #[test]
    fn shape_estimate_matches_the_core_library() {
        unsafe {
            let spec_json = actionlab_standard_spec_json(1);
            let mut kin = ptr::null_mut();
            assert_eq!(actionlab_kinetics_quadratic(1.0, &mut kin), ActionlabStatus::Ok);
            let (mut mean, mut se) = (0.0, 0.0);
            let status = actionlab_shape_estimate(
                spec_json,
                kin,
                0.1,
                0.05,
                50,
                4,
                120,
                ptr::null(),
                1.0,
                1.0,
                3,
                2024,
                &mut mean,
                &mut se,
            );
            assert_eq!(status, ActionlabStatus::Ok);
            assert!(mean.is_finite() && se >= 0.0);

            let spec = EnvironmentSpec::standard(1);
            let grid = GridSpec {
                dimension: 1,
                dt: 0.1,
                dx: 0.05,
                steps: 50,
                velocity_window: 4,
                half_extent_nodes: 120,
            };
            let direct = estimate_shape(
                &spec,
                &KineticEnergy::quadratic(1.0),
                &grid,
                &Frame::rest(1),
                &Replication { replicates: 3, base_seed: 2024 },
            )
            .unwrap();
            assert!((direct.mean - mean).abs() < 1e-12);
            assert!((direct.std_error - se).abs() < 1e-12);

            actionlab_kinetics_free(kin);
            actionlab_string_free(spec_json);
        }
    }
}
