// Expects `wasm-pack build --target web --out-dir www/pkg` to have been run in crates/demo.
import init, { Scene } from "./pkg/wss_demo.js";

const $ = (id) => document.getElementById(id);
let scene = null;

function paint(id, rgba) {
  const c = $(id);
  const img = new ImageData(new Uint8ClampedArray(rgba), scene.width(), scene.height());
  c.width = scene.width();
  c.height = scene.height();
  c.getContext("2d").putImageData(img, 0, 0);
}

function labelBits() {
  let bits = 0;
  for (const box of document.querySelectorAll(".lbl")) {
    if (box.checked) bits |= 1 << Number(box.value);
  }
  return bits;
}

function setLabels(bits) {
  for (const box of document.querySelectorAll(".lbl")) {
    box.checked = (bits & (1 << Number(box.value))) !== 0;
  }
}

function update() {
  const bits = labelBits();
  paint("argmax", scene.constrained(bits));
  $("iou-a").value = scene.last_iou().toFixed(3);
  for (const id of ["iters", "wg", "wb", "sxy", "srgb"]) $(id + "-v").value = $(id).value;
  paint("crf", scene.refine(bits, Number($("iters").value), Number($("wg").value),
    Number($("wb").value), Number($("sxy").value), Number($("srgb").value)));
  $("iou-c").value = scene.last_iou().toFixed(3);
}

function generate() {
  if (scene) scene.free();
  scene = new Scene(Number($("seed").value), Number($("noise").value), $("clutter").checked);
  paint("image", scene.image_rgba());
  paint("truthc", scene.truth_rgba());
  setLabels(0b1110);
  update();
}

await init();
$("generate").addEventListener("click", generate);
$("truth").addEventListener("click", () => { setLabels(scene.true_label_bits()); update(); });
for (const el of document.querySelectorAll("input.lbl, #iters, #wg, #wb, #sxy, #srgb")) {
  el.addEventListener("input", update);
}
generate();
