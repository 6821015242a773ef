#!/usr/bin/env python3
"""Minimal stand-in for a docker-compatible container engine.

Images are directories under $STUB_ENGINE_STATE/images holding a root
filesystem and a small config. `run` assembles a temporary root from the
image, links the bind mounts into it and executes the command on the host
from inside that root, so commands must only use relative paths.

Every invocation is appended to $STUB_ENGINE_STATE/calls.log. A pushed image
is copied to $STUB_ENGINE_STATE/registry, where `pull` looks for it.
"""

import json
import os
import shlex
import shutil
import subprocess
import sys
import tempfile

STATE = os.environ.get("STUB_ENGINE_STATE")


def fail(message, code=1):
    sys.stderr.write(f"stub-engine: {message}\n")
    sys.exit(code)


def image_dir(base, tag):
    return os.path.join(STATE, base, tag.replace("/", "__").replace(":", "--"))


def load_config(path):
    with open(os.path.join(path, "config.json")) as fh:
        return json.load(fh)


def parse_exec_form(rest):
    rest = rest.strip()
    if rest.startswith("["):
        return json.loads(rest)
    return ["sh", "-c", rest]


def copy_into(src, dst):
    if os.path.isdir(src):
        shutil.copytree(src, dst, symlinks=True, dirs_exist_ok=True)
    else:
        if dst.endswith("/") or os.path.isdir(dst):
            dst = os.path.join(dst, os.path.basename(src))
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        shutil.copy2(src, dst)


def rooted(root, path):
    return os.path.join(root, path.lstrip("/"))


def cmd_build(args):
    dockerfile = tag = None
    rest = []
    it = iter(args)
    for arg in it:
        if arg == "-f":
            dockerfile = next(it)
        elif arg == "-t":
            tag = next(it)
        else:
            rest.append(arg)
    if dockerfile is None or tag is None or len(rest) != 1:
        fail("usage: build -f FILE -t TAG CONTEXT", 125)
    context = rest[0]
    staging = tempfile.mkdtemp(prefix="stub-image-")
    rootfs = os.path.join(staging, "rootfs")
    os.makedirs(rootfs)
    config = {"workdir": "/", "cmd": [], "entrypoint": [], "env": {}}
    with open(dockerfile) as fh:
        lines = [line.strip() for line in fh]
    for line in lines:
        if not line or line.startswith("#"):
            continue
        instruction, _, value = line.partition(" ")
        instruction = instruction.upper()
        print(f"STEP {instruction} {value}")
        if instruction == "FROM":
            base = image_dir("images", value.strip())
            if os.path.isdir(base):
                shutil.copytree(os.path.join(base, "rootfs"), rootfs, symlinks=True, dirs_exist_ok=True)
                config = load_config(base)
        elif instruction == "WORKDIR":
            config["workdir"] = value.strip()
            os.makedirs(rooted(rootfs, config["workdir"]), exist_ok=True)
        elif instruction == "COPY":
            parts = shlex.split(value)
            dst = parts[-1]
            if not dst.startswith("/"):
                dst = os.path.join(config["workdir"], dst)
            for src in parts[:-1]:
                source = os.path.join(context, src)
                if not os.path.exists(source):
                    fail(f"COPY source {src} not found in context")
                target = rooted(rootfs, dst) + ("/" if dst.endswith("/") else "")
                copy_into(source, target)
        elif instruction == "RUN":
            cwd = rooted(rootfs, config["workdir"])
            os.makedirs(cwd, exist_ok=True)
            result = subprocess.run(["sh", "-c", value], cwd=cwd)
            if result.returncode != 0:
                fail(f"RUN exited with {result.returncode}")
        elif instruction == "CMD":
            config["cmd"] = parse_exec_form(value)
        elif instruction == "ENTRYPOINT":
            config["entrypoint"] = parse_exec_form(value)
        elif instruction == "ENV":
            key, _, val = value.partition("=")
            config["env"][key.strip()] = val.strip()
        else:
            fail(f"unsupported instruction {instruction}")
    with open(os.path.join(staging, "config.json"), "w") as fh:
        json.dump(config, fh)
    target = image_dir("images", tag)
    shutil.rmtree(target, ignore_errors=True)
    os.makedirs(os.path.dirname(target), exist_ok=True)
    shutil.move(staging, target)
    print(f"built {tag}")


def cmd_image(args):
    if len(args) != 2 or args[0] != "inspect":
        fail("usage: image inspect TAG", 125)
    path = image_dir("images", args[1])
    if not os.path.isdir(path):
        fail(f"no such image: {args[1]}")
    print(json.dumps([{"RepoTags": [args[1]], "Config": load_config(path)}]))


def cmd_pull(args):
    source = image_dir("registry", args[0])
    if not os.path.isdir(source):
        fail(f"pull access denied for {args[0]}: not found")
    target = image_dir("images", args[0])
    shutil.rmtree(target, ignore_errors=True)
    shutil.copytree(source, target, symlinks=True)
    print(f"pulled {args[0]}")


def cmd_push(args):
    source = image_dir("images", args[0])
    if not os.path.isdir(source):
        fail(f"no such image: {args[0]}")
    target = image_dir("registry", args[0])
    shutil.rmtree(target, ignore_errors=True)
    shutil.copytree(source, target, symlinks=True)


def cmd_rmi(args):
    path = image_dir("images", args[0])
    if not os.path.isdir(path):
        fail(f"no such image: {args[0]}")
    shutil.rmtree(path)


def mount(root, host, target, readonly):
    destination = rooted(root, target)
    if readonly:
        copy_into(host, destination)
        return
    if os.path.realpath(destination) == os.path.realpath(host):
        return
    if os.path.islink(destination) or os.path.isfile(destination):
        os.unlink(destination)
    elif os.path.isdir(destination):
        if not os.path.realpath(destination).startswith(os.path.realpath(root) + os.sep):
            fail(f"refusing to replace {destination}")
        shutil.rmtree(destination)
    os.makedirs(os.path.dirname(destination), exist_ok=True)
    os.symlink(os.path.realpath(host), destination)


def cmd_run(args):
    workdir = None
    env = dict(os.environ)
    mounts = []
    it = iter(args)
    image = None
    for arg in it:
        if arg == "--rm":
            continue
        if arg == "-w":
            workdir = next(it)
        elif arg == "-e":
            key, _, value = next(it).partition("=")
            env[key] = value
        elif arg == "-v":
            parts = next(it).split(":")
            readonly = len(parts) == 3 and parts[2] == "ro"
            mounts.append((parts[0], parts[1], readonly))
        elif arg.startswith("-"):
            fail(f"unsupported run flag {arg}", 125)
        else:
            image = arg
            break
    command = list(it)
    if image is None:
        fail("usage: run [OPTIONS] IMAGE [COMMAND...]", 125)
    path = image_dir("images", image)
    if not os.path.isdir(path):
        fail(f"no such image: {image}", 125)
    config = load_config(path)
    env.update(config.get("env", {}))
    root = tempfile.mkdtemp(prefix="stub-container-")
    try:
        shutil.copytree(os.path.join(path, "rootfs"), root, symlinks=True, dirs_exist_ok=True)
        for host, target, readonly in mounts:
            mount(root, host, target, readonly)
        argv = command or (config.get("entrypoint", []) + config.get("cmd", []))
        if not argv:
            fail("no command specified", 125)
        cwd = rooted(root, workdir or config.get("workdir", "/"))
        os.makedirs(cwd, exist_ok=True)
        result = subprocess.run(argv, cwd=cwd, env=env)
        code = result.returncode
        if code < 0:
            code = 128 - code
        return code
    finally:
        shutil.rmtree(root, ignore_errors=True)


def main():
    if STATE is None:
        fail("STUB_ENGINE_STATE is not set", 125)
    os.makedirs(STATE, exist_ok=True)
    args = sys.argv[1:]
    with open(os.path.join(STATE, "calls.log"), "a") as fh:
        fh.write(" ".join(args) + "\n")
    if args == ["--version"]:
        print("stub-engine version 1.0")
        return 0
    if not args:
        fail("no command", 125)
    handlers = {
        "build": cmd_build,
        "image": cmd_image,
        "pull": cmd_pull,
        "push": cmd_push,
        "rmi": cmd_rmi,
        "run": cmd_run,
    }
    handler = handlers.get(args[0])
    if handler is None:
        fail(f"unknown command {args[0]}", 125)
    code = handler(args[1:])
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
