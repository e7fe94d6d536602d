//! Program UDFs run as rhai scripts.
//!
//! A script is a function body. The tuple's columns are bound as variables
//! (`o0_oname`, `o0_x1`, ..., `o1_o0_rnames`, `height`, `width`), followed by
//! the bound numeric parameters under their own names, and `img` when pixel
//! access is allowed. The last expression, or `return`, must be a boolean.
//!
//! Engines are per thread, have no clock, no modules, no I/O, and are
//! interrupted once a call exceeds its deadline.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use image::RgbImage;
use rhai::packages::{Package, StandardPackage};
use rhai::{Array, Dynamic, Engine, EvalAltResult, ImmutableString, Scope, AST, FLOAT, INT};

use scenequery_core::dsl::Arity;
use scenequery_core::scene::{FrameIdx, ObjectView, VideoId};
use scenequery_core::TupleView;

use crate::storage::ImageSource;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

/// Column variables in binding order. Attribute UDFs get the `o0` prefix plus
/// `height` and `width`.
pub const BINARY_COLUMNS: [&str; 17] = [
    "img",
    "o0_oname",
    "o0_x1",
    "o0_y1",
    "o0_x2",
    "o0_y2",
    "o0_anames",
    "o1_oname",
    "o1_x1",
    "o1_y1",
    "o1_x2",
    "o1_y2",
    "o1_anames",
    "o0_o1_rnames",
    "o1_o0_rnames",
    "height",
    "width",
];

pub const UNARY_COLUMNS: [&str; 9] =
    ["img", "o0_oname", "o0_x1", "o0_y1", "o0_x2", "o0_y2", "o0_anames", "height", "width"];

pub fn columns(arity: Arity) -> &'static [&'static str] {
    match arity {
        Arity::Unary => &UNARY_COLUMNS,
        Arity::Binary => &BINARY_COLUMNS,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SandboxError {
    #[error("script does not compile: {0}")]
    Compile(String),
    #[error("script failed: {0}")]
    Runtime(String),
    #[error("script exceeded its {0:?} time limit")]
    Timeout(Duration),
    #[error("script returned {0}, expected a boolean")]
    NotBoolean(String),
    #[error("pixels unavailable: {0}")]
    PixelsUnavailable(String),
    #[error("parameter name {0:?} is not a plain identifier or shadows a column")]
    BadParameter(String),
}

#[derive(Clone, Debug)]
pub struct Limits {
    pub timeout: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT }
    }
}

/// Lazily loaded frame pixels, exposed to scripts as `img`.
#[derive(Clone)]
pub struct FrameImage {
    source: Option<Arc<dyn ImageSource>>,
    vid: VideoId,
    fid: FrameIdx,
    loaded: Arc<OnceLock<Result<Arc<RgbImage>, String>>>,
}

const PIXEL_ERROR: &str = "pixels unavailable";

impl FrameImage {
    fn get(&mut self) -> Result<Arc<RgbImage>, Box<EvalAltResult>> {
        let loaded = self.loaded.get_or_init(|| match &self.source {
            Some(s) => s.frame_image(self.vid, self.fid).map_err(|e| e.to_string()),
            None => Err("dataset has no frame images".to_string()),
        });
        loaded.clone().map_err(|e| format!("{PIXEL_ERROR}: {e}").into())
    }

    fn width(&mut self) -> Result<INT, Box<EvalAltResult>> {
        Ok(self.get()?.width() as INT)
    }

    fn height(&mut self) -> Result<INT, Box<EvalAltResult>> {
        Ok(self.get()?.height() as INT)
    }

    fn pixel(&mut self, x: INT, y: INT) -> Result<Array, Box<EvalAltResult>> {
        let img = self.get()?;
        if x < 0 || y < 0 || x >= img.width() as INT || y >= img.height() as INT {
            return Err(format!("pixel ({x}, {y}) outside the image").into());
        }
        let p = img.get_pixel(x as u32, y as u32);
        Ok(p.0.iter().map(|&c| Dynamic::from_int(c as INT)).collect())
    }

    /// Mean colour of the clamped box, `[r, g, b]` as floats.
    fn mean_rgb(&mut self, x1: INT, y1: INT, x2: INT, y2: INT) -> Result<Array, Box<EvalAltResult>> {
        let img = self.get()?;
        let (w, h) = (img.width() as INT, img.height() as INT);
        let (x1, x2) = (x1.clamp(0, w), x2.clamp(0, w));
        let (y1, y2) = (y1.clamp(0, h), y2.clamp(0, h));
        let mut sum = [0.0f64; 3];
        let mut n = 0.0;
        for y in y1..y2 {
            for x in x1..x2 {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    sum[c] += p.0[c] as f64;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err("mean_rgb over an empty box".into());
        }
        Ok(sum.iter().map(|s| Dynamic::from_float(s / n)).collect())
    }
}

thread_local! {
    static DEADLINE: Cell<Option<Instant>> = const { Cell::new(None) };
    static ENGINE: Engine = build_engine();
    static ASTS: RefCell<HashMap<String, AST>> = RefCell::new(HashMap::new());
}

fn build_engine() -> Engine {
    let mut e = Engine::new_raw();
    e.register_global_module(StandardPackage::new().as_shared_module());
    e.set_strict_variables(true);
    e.set_max_expr_depths(64, 32);
    e.set_max_call_levels(32);
    e.set_max_string_size(1 << 16);
    e.set_max_array_size(1 << 16);
    e.set_max_map_size(1 << 12);
    e.disable_symbol("eval");
    e.on_print(|_| {});
    e.on_debug(|_, _, _| {});
    e.on_progress(|ops| {
        if ops % 512 != 0 {
            return None;
        }
        match DEADLINE.with(Cell::get) {
            Some(d) if Instant::now() > d => Some(Dynamic::UNIT),
            _ => None,
        }
    });
    e.register_type_with_name::<FrameImage>("Image")
        .register_fn("width", FrameImage::width)
        .register_fn("height", FrameImage::height)
        .register_fn("pixel", FrameImage::pixel)
        .register_fn("mean_rgb", FrameImage::mean_rgb);
    e
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Checks that parameter names are usable as script variables.
pub fn check_parameter_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<(), SandboxError> {
    for n in names {
        if !is_identifier(n) || BINARY_COLUMNS.contains(&n) {
            return Err(SandboxError::BadParameter(n.to_string()));
        }
    }
    Ok(())
}

fn names(arr: &std::collections::BTreeSet<String>) -> Dynamic {
    let a: Array = arr.iter().map(|s| Dynamic::from(ImmutableString::from(s.as_str()))).collect();
    Dynamic::from_array(a)
}

fn push_object(scope: &mut Scope<'_>, prefix: &str, o: &ObjectView<'_>) {
    scope.push_constant(format!("{prefix}_oname"), ImmutableString::from(o.oname));
    scope.push_constant(format!("{prefix}_x1"), o.bbox.x1 as INT);
    scope.push_constant(format!("{prefix}_y1"), o.bbox.y1 as INT);
    scope.push_constant(format!("{prefix}_x2"), o.bbox.x2 as INT);
    scope.push_constant(format!("{prefix}_y2"), o.bbox.y2 as INT);
    scope.push_constant_dynamic(format!("{prefix}_anames"), names(o.anames));
}

/// A compiled-on-demand program with its parameter binding.
#[derive(Clone, Debug)]
pub struct Program<'a> {
    pub script: &'a str,
    pub arity: Arity,
    pub params: &'a [(String, f64)],
    pub allow_pixels: bool,
}

impl Program<'_> {
    fn key(&self) -> String {
        let mut k = format!("{}|{}|", self.arity.count(), self.allow_pixels);
        for (n, _) in self.params {
            k.push_str(n);
            k.push(',');
        }
        k.push('|');
        k.push_str(self.script);
        k
    }

    fn template_scope(&self) -> Scope<'static> {
        let mut scope = Scope::new();
        for &c in columns(self.arity) {
            if c == "img" && !self.allow_pixels {
                continue;
            }
            // Plain variables: the optimizer would inline constants.
            scope.push_dynamic(c, Dynamic::UNIT);
        }
        for (n, _) in self.params {
            scope.push(n.clone(), 0.0 as FLOAT);
        }
        scope
    }

    fn compiled(&self) -> Result<AST, SandboxError> {
        check_parameter_names(self.params.iter().map(|(n, _)| n.as_str()))?;
        let key = self.key();
        if let Some(ast) = ASTS.with(|m| m.borrow().get(&key).cloned()) {
            return Ok(ast);
        }
        let scope = self.template_scope();
        let ast = ENGINE
            .with(|e| e.compile_with_scope(&scope, self.script))
            .map_err(|e| SandboxError::Compile(e.to_string()))?;
        ASTS.with(|m| {
            let mut m = m.borrow_mut();
            if m.len() > 1024 {
                m.clear();
            }
            m.insert(key, ast.clone());
        });
        Ok(ast)
    }

    /// Compiles without running.
    pub fn check(&self) -> Result<(), SandboxError> {
        self.compiled().map(|_| ())
    }

    pub fn run(
        &self,
        tuple: &TupleView<'_>,
        pixels: Option<Arc<dyn ImageSource>>,
        limits: &Limits,
    ) -> Result<bool, SandboxError> {
        let ast = self.compiled()?;
        let mut scope = Scope::new();
        if self.allow_pixels {
            let img = FrameImage {
                source: pixels,
                vid: tuple.unit.vid,
                fid: tuple.unit.fid,
                loaded: Arc::new(OnceLock::new()),
            };
            scope.push_constant("img", img);
        }
        push_object(&mut scope, "o0", &tuple.o0);
        if self.arity == Arity::Binary {
            let o1 = tuple.o1.as_ref().ok_or_else(|| SandboxError::Runtime("relationship UDF on a single object".into()))?;
            push_object(&mut scope, "o1", o1);
            scope.push_constant_dynamic("o0_o1_rnames", names(tuple.o0_o1_rnames));
            scope.push_constant_dynamic("o1_o0_rnames", names(tuple.o1_o0_rnames));
        }
        scope.push_constant("height", tuple.height as INT);
        scope.push_constant("width", tuple.width as INT);
        for (n, v) in self.params {
            scope.push_constant(n.clone(), *v as FLOAT);
        }
        DEADLINE.with(|d| d.set(Some(Instant::now() + limits.timeout)));
        let out = ENGINE.with(|e| e.eval_ast_with_scope::<Dynamic>(&mut scope, &ast));
        DEADLINE.with(|d| d.set(None));
        match out {
            Ok(v) => v.as_bool().map_err(|t| SandboxError::NotBoolean(t.to_string())),
            Err(e) => Err(classify(*e, limits)),
        }
    }
}

fn classify(e: EvalAltResult, limits: &Limits) -> SandboxError {
    match e {
        EvalAltResult::ErrorTerminated(..) => SandboxError::Timeout(limits.timeout),
        EvalAltResult::ErrorInFunctionCall(_, _, inner, _) => classify(*inner, limits),
        other => {
            let text = other.to_string();
            if text.contains(PIXEL_ERROR) {
                SandboxError::PixelsUnavailable(text)
            } else {
                SandboxError::Runtime(text)
            }
        }
    }
}
