"""Smoke test for the pyhcbiquad extension module.

Build and run from the repository root:

    cargo build --release -p hcbiquad-py
    python3 python/smoke_test.py target/release
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile


def load_module(build_dir):
    for name in ("libpyhcbiquad.so", "libpyhcbiquad.dylib", "pyhcbiquad.dll"):
        path = pathlib.Path(build_dir) / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("pyhcbiquad", str(path))
            spec = importlib.util.spec_from_file_location("pyhcbiquad", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit(f"no pyhcbiquad library in {build_dir}; run cargo build -p hcbiquad-py first")


def main():
    build_dir = sys.argv[1] if len(sys.argv) > 1 else "target/release"
    hc = load_module(build_dir)

    assert hc.mt2_param_count("parametric_eq") == 210
    assert hc.mt2_param_count("coefficient") == 274
    assert hc.mt2_param_count("pole_zero") == 274

    teacher = hc.Model.teacher()
    assert teacher.stages == 5
    assert teacher.control_names() == ["DIST", "LOW", "HIGH", "MID", "MID FREQ", "LEVEL"]

    fs = teacher.sample_rate
    x = [0.3 * math.sin(2 * math.pi * 440 * n / fs) for n in range(4410)]
    y_time = teacher.render(x, {"DIST": 0.5, "LEVEL": 0.8})
    y_freq = teacher.render_freq(x, 4096, {"DIST": 0.5, "LEVEL": 0.8})
    assert len(y_time) == len(x)
    err = math.sqrt(sum((a - b) ** 2 for a, b in zip(y_time, y_freq)))
    ref = math.sqrt(sum(a * a for a in y_time))
    assert err / ref < 1e-3, err / ref

    freqs, mag_db, phase = teacher.stage_response(3, {"MID": 1.0}, 1024)
    assert len(freqs) == len(mag_db) == len(phase) == 513
    assert all(math.isfinite(v) for v in mag_db)

    for row in teacher.stage_sections(0):
        a1, a2 = row[3], row[4]
        assert abs(a2) < 1 and abs(a1) < 1 + a2

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "teacher.json"
        teacher.save(str(path))
        back = hc.Model.load(str(path))
        assert back.params() == teacher.params()
    assert hc.Model.from_json(teacher.to_json()).params() == teacher.params()

    for bad in (lambda: teacher.render(x, {"TONE": 0.5}), lambda: hc.Model.from_json("{}")):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")

    print(f"ok: {teacher!r}, time/freq relative error {err / ref:.2e}")


if __name__ == "__main__":
    main()
