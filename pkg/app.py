#!/usr/bin/env python3
"""
Replica Theory API Server
=========================

Flask HTTP surface over the theory side of the mismatched regression engine:
fixed-point solves, closed forms, free energies, regression predictions and
potential checks. Simulations are CLI-only (they can run for minutes).

Request bodies use the same JSON sections as the experiment configuration:

    {"model": {"alpha": 2, "delta_star": 1, "kappa": 0.5, "gamma": 1,
               "potential": {"kind": "quadratic", "delta": 1}},
     "solver": {"tol": 1e-12}}
"""

import logging
import os
from datetime import datetime, timezone
from typing import Any, Dict

import numpy as np
from flask import Flask, jsonify, request

from mismatched_regression import __version__
from mismatched_regression.config import ExperimentConfig, SolverSection
from mismatched_regression.errors import ConfigError, ModelError
from mismatched_regression.potential import check_growth, finite_difference_error
from mismatched_regression.replica import (
    closed_form_quadratic,
    free_energy,
    free_energy_bar,
    free_energy_gradient,
    predict_regression,
    reference_endpoints,
    solve_fixed_point,
)

logging.basicConfig(
    level=getattr(logging, os.environ.get("MISMATCH_LOG_LEVEL", "INFO").upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

app = Flask(__name__)

HOST = '0.0.0.0'
PORT = int(os.environ.get('PORT', 8080))
DEBUG = os.environ.get('FLASK_DEBUG', 'False').lower() == 'true'
SERVICE_NAME = "mismatched-regression-api"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _config_from_request() -> ExperimentConfig:
    body = request.get_json(silent=True)
    if not isinstance(body, dict):
        raise ConfigError("body", "expected a JSON object")
    return ExperimentConfig.from_dict({key: body[key] for key in ("model", "solver") if key in body})


def _respond(payload: Dict[str, Any]):
    payload["timestamp"] = _now()
    return jsonify(payload)


@app.route('/health', methods=['GET'])
def health_check():
    return jsonify({
        "status": "healthy",
        "timestamp": _now(),
        "service": SERVICE_NAME,
        "version": __version__,
    })


@app.route('/status', methods=['GET'])
def status():
    """Service description and the solver defaults applied to every request."""
    return jsonify({
        "service": SERVICE_NAME,
        "version": __version__,
        "status": "running",
        "port": PORT,
        "timestamp": _now(),
        "solver_defaults": SolverSection().to_dict(),
        "endpoints": [
            "/api/v1/solve",
            "/api/v1/closed-form",
            "/api/v1/free-energy",
            "/api/v1/predict",
            "/api/v1/check-potential",
        ],
    })


@app.route('/api/v1/solve', methods=['POST'])
def solve():
    config = _config_from_request()
    params = config.model.params()
    report = solve_fixed_point(params, config.solver.grid(), config.solver.options())
    logger.info(f"Solved {params.to_dict()} converged={report.converged}")
    return _respond(report.to_dict())


@app.route('/api/v1/closed-form', methods=['POST'])
def closed_form():
    config = _config_from_request()
    state = closed_form_quadratic(config.model.params())
    return _respond({"state": state.to_dict()})


@app.route('/api/v1/free-energy', methods=['POST'])
def free_energy_endpoint():
    config = _config_from_request()
    params = config.model.params()
    grid = config.solver.grid()
    report = solve_fixed_point(params, grid, config.solver.options())
    state = report.state
    endpoints = reference_endpoints(params)
    return _respond({
        "state": state.to_dict(),
        "converged": report.converged,
        "F": free_energy(params, state.q, state.rho, grid),
        "F_bar": free_energy_bar(params, state, grid),
        "gradient_sup_norm": float(np.max(np.abs(free_energy_gradient(params, state, grid)))),
        "reference": {"f0": endpoints.f0, "state0": endpoints.state0.to_dict()},
    })


@app.route('/api/v1/predict', methods=['POST'])
def predict():
    config = _config_from_request()
    prediction = predict_regression(config.model.params(), config.solver.grid(), config.solver.options())
    return _respond(prediction.to_dict())


@app.route('/api/v1/check-potential', methods=['POST'])
def check_potential():
    config = _config_from_request()
    potential = config.model.potential
    err1, err2 = finite_difference_error(potential)
    return _respond({
        "potential": potential.to_dict(),
        "growth": check_growth(potential).to_dict(),
        "finite_difference_error": {"u1": err1, "u2": err2},
    })


@app.errorhandler(ModelError)
def model_error(error: ModelError):
    logger.warning(f"Rejected request to {request.path}: {error}")
    body = {
        "error": type(error).__name__,
        "message": str(error),
        "timestamp": _now(),
    }
    if isinstance(error, ConfigError):
        body["field"] = error.field_path
    return jsonify(body), 400


@app.errorhandler(404)
def not_found(error):
    return jsonify({
        "error": "Not Found",
        "url": request.url,
        "message": "The requested resource was not found",
        "timestamp": _now(),
    }), 404


@app.errorhandler(405)
def method_not_allowed(error):
    return jsonify({
        "error": "Method Not Allowed",
        "message": error.description,
        "timestamp": _now(),
    }), 405


@app.errorhandler(500)
def internal_error(error):
    logger.error(f"Internal server error: {str(error)}")
    return jsonify({
        "error": "Internal Server Error",
        "message": "An internal server error occurred",
        "timestamp": _now(),
    }), 500


if __name__ == '__main__':
    print(f"🚀 Starting {SERVICE_NAME} {__version__}")
    print(f"📍 Host: {HOST}:{PORT}")
    print(f"🐛 Debug: {DEBUG}")
    print("=" * 60)
    app.run(host=HOST, port=PORT, debug=DEBUG, threaded=True)
