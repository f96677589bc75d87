#!/usr/bin/env python3
import os  #launcher with env-driven defaults
import sys

from dotenv import load_dotenv

from parareal_lab.main import main

#load environment variables
load_dotenv()

if __name__ == "__main__":
    argv = sys.argv[1:]
    command = argv[0] if argv else os.getenv("PARAREAL_COMMAND", "parareal")
    config = argv[1] if len(argv) > 1 else os.getenv("PARAREAL_CONFIG", "configs/parareal_desk.toml")
    extra = argv[2:]
    workers = os.getenv("PARAREAL_WORKERS", "1")
    out = os.getenv("PARAREAL_OUTPUT_DIR", "./runs")

    print(f"parareal-lab: {command} {config}")
    print(f"workers: {workers}")
    print(f"output root: {out}")
    print(f"log level: {os.getenv('PARAREAL_LOG_LEVEL', 'info')}")

    sys.exit(main([command, config, *extra]))
