#!/usr/bin/env python3
"""
Startup script for convasr.

    python run.py serve [--port 8000]      start the FastAPI agents
    python run.py <command> [args...]      train, decode, score, average, info, synth, extract
"""

import subprocess
import sys

from convasr.cli import main as cli_main


def start_backend(port: str = "8000") -> int:
    """Start the FastAPI backend server"""
    print(f"Starting convasr backend on port {port}...")
    try:
        subprocess.run([
            sys.executable, "-m", "uvicorn", "main_app:app",
            "--host", "0.0.0.0",
            "--port", port,
        ], check=True)
    except KeyboardInterrupt:
        print("\nBackend server stopped by user")
    except subprocess.CalledProcessError as e:
        print(f"Error starting backend: {e}")
        return 1
    return 0


def main() -> int:
    args = sys.argv[1:]
    if not args or args[0] == "serve":
        port = args[args.index("--port") + 1] if "--port" in args else "8000"
        return start_backend(port)
    return cli_main(args)


if __name__ == "__main__":
    sys.exit(main())
