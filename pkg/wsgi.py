#!/usr/bin/env python3
"""
WSGI entry point
================

Exposes the Flask app from app.py to WSGI servers (gunicorn wsgi:app).
"""

import os

from app import app

if __name__ == "__main__":
    # running the WSGI file directly is for local testing only
    port = int(os.environ.get('PORT', 8080))
    app.run(host='0.0.0.0', port=port, debug=False)
