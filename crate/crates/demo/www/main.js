import init, { Demo, skeleton_view, noise_preview } from "./pkg/avatar_demo.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, bytes) {
  const n = canvas.width;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(bytes), n, n), 0, 0);
}

function report(err) {
  $("status").textContent = `error: ${err}`;
}

await init();
$("status").textContent = "ready";

let demo = new Demo(1n);

function view() {
  return [Number($("az").value), Number($("el").value)];
}

function drawField() {
  const [az, el] = view();
  paint($("field"), demo.render(az, el, $("field").width));
  $("steps").textContent = demo.steps_done();
}

function drawSkeleton() {
  const [az, el] = view();
  $("az-val").textContent = az;
  $("el-val").textContent = el;
  paint($("skeleton"), skeleton_view(az, el, $("skeleton").width));
}

function drawNoise() {
  const t = Number($("t").value);
  $("t-val").textContent = t;
  try {
    paint($("noise"), noise_preview(t, $("noise").width, BigInt($("seed").value || 0)));
    $("status").textContent = "ready";
  } catch (e) {
    report(e);
  }
}

$("step").addEventListener("click", () => {
  $("status").textContent = "distilling...";
  // Let the status repaint before the blocking call.
  setTimeout(() => {
    try {
      demo.step(10);
      drawField();
      $("status").textContent = "ready";
    } catch (e) {
      report(e);
    }
  }, 0);
});

$("reset").addEventListener("click", () => {
  demo.free();
  demo = new Demo(1n);
  drawField();
});

for (const id of ["az", "el"]) {
  $(id).addEventListener("input", () => {
    drawSkeleton();
    drawField();
  });
}
$("t").addEventListener("input", drawNoise);
$("seed").addEventListener("change", drawNoise);

drawField();
drawSkeleton();
drawNoise();
