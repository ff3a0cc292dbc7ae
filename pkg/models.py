from datetime import datetime
import logging

from sqlalchemy import (Boolean, DateTime, Float, ForeignKey, Integer, String,
                        Text, create_engine)
from sqlalchemy.orm import (DeclarativeBase, Mapped, mapped_column,
                            relationship, sessionmaker)

# Initialize logger
logger = logging.getLogger(__name__)

DEFAULT_LEDGER_URL = 'sqlite:///clp_results.db'


# Create SQLAlchemy base
class Base(DeclarativeBase):
    pass


class RunRecord(Base):
    __tablename__ = 'run_record'

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    command: Mapped[str] = mapped_column(String(32), nullable=False)
    started_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    finished_at: Mapped[datetime] = mapped_column(DateTime, nullable=True)
    seed: Mapped[int] = mapped_column(Integer, default=0)
    scope: Mapped[str] = mapped_column(String(16), nullable=True)
    method: Mapped[str] = mapped_column(String(16), nullable=True)
    rows_total: Mapped[int] = mapped_column(Integer, default=0)
    rows_failed: Mapped[int] = mapped_column(Integer, default=0)
    success: Mapped[bool] = mapped_column(Boolean, default=True)
    error_message: Mapped[str] = mapped_column(Text, nullable=True)

    results: Mapped[list["WordResult"]] = relationship(back_populates='run', cascade='all, delete-orphan')


class WordResult(Base):
    __tablename__ = 'word_result'

    id: Mapped[int] = mapped_column(Integer, primary_key=True)
    run_id: Mapped[int] = mapped_column(ForeignKey('run_record.id'), nullable=False)
    word: Mapped[str] = mapped_column(String(64), nullable=False)
    error: Mapped[str] = mapped_column(String(16), nullable=True)
    scope: Mapped[str] = mapped_column(String(16), nullable=True)
    p_stoi: Mapped[float] = mapped_column(Float, nullable=True)
    p_estoi: Mapped[float] = mapped_column(Float, nullable=True)
    mcd: Mapped[float] = mapped_column(Float, nullable=True)
    status: Mapped[str] = mapped_column(String(16), default='ok')
    message: Mapped[str] = mapped_column(Text, nullable=True)

    run: Mapped[RunRecord] = relationship(back_populates='results')


def init_db(url=DEFAULT_LEDGER_URL):
    """Create the ledger tables if needed and return a session factory."""
    engine = create_engine(url, pool_pre_ping=True)
    Base.metadata.create_all(engine)
    logger.debug(f"Results ledger ready at {url}")
    return sessionmaker(bind=engine, expire_on_commit=False)
