"""
Run Store Module
This module keeps a SQLAlchemy ledger of harness runs so results of earlier batches can be
listed and compared from the command line.
"""
import datetime
import json
import logging
import os
from typing import Dict, List, Optional

from sqlalchemy import Column, DateTime, Float, Integer, String, Text, create_engine, text
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()

RANKABLE_METRICS = ('fixed_strict', 'success')


class RunRecord(Base):
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    timestamp = Column(DateTime, default=datetime.datetime.utcnow)
    command = Column(String(50), nullable=False)
    config = Column(Text)
    episodes = Column(Integer)
    fixed_strict = Column(Float)
    success = Column(Float)
    out_dir = Column(String(500))

    def __repr__(self):
        return f"<RunRecord(command='{self.command}', episodes={self.episodes}, fixed_strict={self.fixed_strict})>"


def database_url(out_dir: Optional[str] = None) -> str:
    """URL from DATABASE_URL, else a SQLite file in `out_dir`, else in-memory SQLite."""
    url = os.environ.get("DATABASE_URL")
    if not url:
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            return f"sqlite:///{os.path.abspath(os.path.join(out_dir, 'runs.sqlite'))}"
        return "sqlite:///:memory:"
    if url.startswith('postgres://'):
        url = url.replace('postgres://', 'postgresql://', 1)
    return url


_sessions: Dict[str, sessionmaker] = {}


def get_session_factory(url: str) -> sessionmaker:
    if url not in _sessions:
        connect_args = {"connect_timeout": 10} if url.startswith('postgresql') else {}
        engine = create_engine(url, connect_args=connect_args, pool_pre_ping=True)
        Base.metadata.create_all(engine)
        _sessions[url] = sessionmaker(bind=engine)
    return _sessions[url]


def save_run(command: str, config: dict, aggregates: dict, episodes: int,
             out_dir: Optional[str] = None, url: Optional[str] = None) -> bool:
    """
    Record a finished batch. Failures are logged and reported as False; they never abort a run.
    """
    try:
        Session = get_session_factory(url or database_url(out_dir))
    except Exception as e:
        logger.warning("run store unavailable: %s", e)
        return False
    session = Session()
    try:
        record = RunRecord(
            command=command,
            config=json.dumps(config, sort_keys=True),
            episodes=episodes,
            fixed_strict=aggregates.get('fixed_strict', {}).get('mean'),
            success=aggregates.get('success', {}).get('mean'),
            out_dir=os.path.abspath(out_dir) if out_dir else None,
        )
        session.add(record)
        session.commit()
        return True
    except Exception as e:
        session.rollback()
        logger.warning("error saving run: %s", e)
        return False
    finally:
        session.close()


def _to_dict(record: RunRecord) -> dict:
    return {
        "id": record.id,
        "timestamp": record.timestamp.isoformat() if record.timestamp else None,
        "command": record.command,
        "config": json.loads(record.config) if record.config else {},
        "episodes": record.episodes,
        "fixed_strict": record.fixed_strict,
        "success": record.success,
        "out_dir": record.out_dir,
    }


def get_recent_runs(limit: int = 10, out_dir: Optional[str] = None, url: Optional[str] = None) -> List[dict]:
    """
    Most recent runs first
    """
    session = get_session_factory(url or database_url(out_dir))()
    try:
        records = session.query(RunRecord).order_by(RunRecord.timestamp.desc(), RunRecord.id.desc()).limit(limit).all()
        return [_to_dict(r) for r in records]
    except Exception as e:
        logger.warning("error reading recent runs: %s", e)
        return []
    finally:
        session.close()


def get_best_runs(metric: str = 'fixed_strict', limit: int = 5,
                  out_dir: Optional[str] = None, url: Optional[str] = None) -> List[dict]:
    """
    Runs with the highest mean of `metric` ('fixed_strict' or 'success')
    """
    if metric not in RANKABLE_METRICS:
        raise ValueError(f"cannot rank runs by {metric!r}; choose from {RANKABLE_METRICS}")
    session = get_session_factory(url or database_url(out_dir))()
    try:
        query = text(f"""
            SELECT id, command, episodes, {metric} AS score, out_dir
            FROM runs
            WHERE {metric} IS NOT NULL
            ORDER BY score DESC, id ASC
            LIMIT :limit
        """)
        result = session.execute(query, {"limit": limit})
        return [{"id": row[0], "command": row[1], "episodes": row[2], metric: float(row[3]), "out_dir": row[4]}
                for row in result]
    except Exception as e:
        logger.warning("error reading best runs: %s", e)
        return []
    finally:
        session.close()
